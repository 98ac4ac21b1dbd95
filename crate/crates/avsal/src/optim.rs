//! Adaptive-moment gradient descent.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are keyed by parameter order,
/// which the checkpoint format pins through the module visit order.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, param_sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Start one update; returns the bias corrections for this step.
    pub fn begin_step(&mut self) -> (f32, f32) {
        self.step += 1;
        (
            1.0 - self.beta1.powi(self.step as i32),
            1.0 - self.beta2.powi(self.step as i32),
        )
    }

    /// Update one parameter in place from its accumulated gradient (zeros
    /// when none reached it) and drop the gradient. Must be called exactly
    /// once per parameter, in registration order, after `begin_step`.
    pub fn update_param(&mut self, index: usize, p: &mut Tensor, bc: (f32, f32)) -> Result<()> {
        if index >= self.m.len() || self.m[index].len() != p.len() {
            return Err(Error::Internal(format!(
                "optimizer state mismatch at parameter {index}"
            )));
        }
        let grad = p.grad_vec().unwrap_or_else(|| vec![0.0; p.len()]);
        let mut data = p.data().to_vec();
        let (bc1, bc2) = bc;
        for j in 0..data.len() {
            let g = grad[j];
            self.m[index][j] = self.beta1 * self.m[index][j] + (1.0 - self.beta1) * g;
            self.v[index][j] = self.beta2 * self.v[index][j] + (1.0 - self.beta2) * g * g;
            let mh = self.m[index][j] / bc1;
            let vh = self.v[index][j] / bc2;
            data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        *p = Tensor::param(p.shape(), data)?;
        Ok(())
    }

    /// Convenience for flat parameter lists (tests, small fits).
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        let bc = self.begin_step();
        for (i, (_, p)) in params.iter_mut().enumerate() {
            self.update_param(i, p, bc)?;
        }
        Ok(())
    }
}
