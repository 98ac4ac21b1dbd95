//! Parameterized layers built on the tensor ops.
//!
//! Layers own their parameters as plain `Tensor` fields and expose them
//! through [`Module::visit`] / [`Module::visit_mut`] in a fixed order, which
//! is what the optimizer and the checkpoint format key on.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

type Triple = [usize; 3];

/// Parameter traversal in deterministic order with hierarchical names.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Named snapshot of every parameter under a module.
pub fn named_params<M: Module + ?Sized>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Total number of scalar parameters under a module.
pub fn param_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.len());
    n
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_param(rng: &mut Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.range_f32(-bound, bound)).collect();
    Tensor::param(shape, data).expect("init shape")
}

// ---------------------------------------------------------------------------

/// Affine map y = x W + b with weight stored (in, out).
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Linear {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Linear {
            weight: uniform_param(rng, &[in_dim, out_dim], bound),
            bias: uniform_param(rng, &[out_dim], bound),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: Tensor::param(&[in_dim, out_dim], vec![0.0; in_dim * out_dim]).unwrap(),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).unwrap(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Forward over rows: input (rows, in) -> (rows, out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_dim() {
            return Err(Error::dim(format!(
                "linear expects (rows, {}), got {:?}",
                self.in_dim(),
                x.shape()
            )));
        }
        let rows = x.shape()[0];
        let y = x.matmul(&self.weight)?;
        let b = self.bias.reshape(&[1, self.out_dim()])?.expand(&[rows, self.out_dim()])?;
        y.add(&b)
    }

    /// Forward for a single vector (in,) -> (out,).
    pub fn forward_vec(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(&x.reshape(&[1, x.len()])?)?;
        y.reshape(&[self.out_dim()])
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------

/// 3-D convolution layer over (C, T, H, W) volumes.
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: Triple,
    pub dilation: Triple,
    pub padding: Triple,
}

impl Conv3d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: Triple,
        stride: Triple,
        dilation: Triple,
        padding: Triple,
        rng: &mut Rng,
    ) -> Conv3d {
        let fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv3d {
            weight: uniform_param(rng, &[out_ch, in_ch, kernel[0], kernel[1], kernel[2]], bound),
            bias: Some(uniform_param(rng, &[out_ch], bound)),
            stride,
            dilation,
            padding,
        }
    }

    /// Unit-stride convolution with `same` padding for odd kernels.
    pub fn same(in_ch: usize, out_ch: usize, kernel: Triple, rng: &mut Rng) -> Conv3d {
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Conv3d::new(in_ch, out_ch, kernel, [1, 1, 1], [1, 1, 1], padding, rng)
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv3d(&self.weight, self.bias.as_ref(), self.stride, self.dilation, self.padding)
    }
}

impl Module for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------

/// Transposed 3-D convolution layer; `output_padding` disambiguates the
/// output extent per axis and must stay below the stride.
pub struct ConvTranspose3d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: Triple,
    pub padding: Triple,
    pub output_padding: Triple,
}

impl ConvTranspose3d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: Triple,
        stride: Triple,
        padding: Triple,
        output_padding: Triple,
        rng: &mut Rng,
    ) -> ConvTranspose3d {
        let fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
        let bound = 1.0 / (fan_in as f32).sqrt();
        ConvTranspose3d {
            weight: uniform_param(rng, &[in_ch, out_ch, kernel[0], kernel[1], kernel[2]], bound),
            bias: Some(uniform_param(rng, &[out_ch], bound)),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose3d(
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}

impl Module for ConvTranspose3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------

/// Group normalization over (C, T, H, W): per-group standardization across
/// channels-within-group and all spatio-temporal positions, then a learned
/// per-channel affine. `groups == C` gives instance norm, `groups == 1`
/// layer norm.
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Result<GroupNorm> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            groups,
            gamma: Tensor::param(&[channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::dim(format!("group norm expects rank 4, got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        if c != self.gamma.len() {
            return Err(Error::dim(format!(
                "group norm built for {} channels, got {:?}",
                self.gamma.len(),
                x.shape()
            )));
        }
        let (t, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let per_group = c / self.groups * t * h * w;
        let grouped = x.reshape(&[self.groups, per_group])?;
        let mean = grouped.mean_axes(&[1], true)?.expand(&[self.groups, per_group])?;
        let centered = grouped.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_axes(&[1], true)?;
        let denom = var.add_scalar(self.eps).sqrt().expand(&[self.groups, per_group])?;
        let normed = centered.div(&denom)?.reshape(&[c, t, h, w])?;
        let gamma = self.gamma.reshape(&[c, 1, 1, 1])?.expand(&[c, t, h, w])?;
        let beta = self.beta.reshape(&[c, 1, 1, 1])?.expand(&[c, t, h, w])?;
        normed.mul(&gamma)?.add(&beta)
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_zero_init() {
        let l = Linear::zeros(3, 2);
        let x = Tensor::from_vec(&[4, 3], vec![1.0; 12]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(l.forward(&Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn group_norm_standardizes() {
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(&[4, 1, 2, 2], (0..16).map(|_| rng.range_f32(-3.0, 3.0)).collect())
            .unwrap();
        let gn = GroupNorm::new(2, 4).unwrap();
        let y = gn.forward(&x).unwrap();
        // gamma=1, beta=0: each group of 8 values has ~zero mean, unit var.
        for g in 0..2 {
            let vals = &y.data()[g * 8..(g + 1) * 8];
            let mean: f32 = vals.iter().sum::<f32>() / 8.0;
            let var: f32 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5, "group {g} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "group {g} var {var}");
        }
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        assert!(GroupNorm::new(3, 4).is_err());
    }

    #[test]
    fn param_names_are_hierarchical() {
        let mut rng = Rng::new(2);
        let c = Conv3d::new(1, 2, [1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1], &mut rng);
        let names: Vec<String> = named_params(&c).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["weight", "bias"]);
        assert_eq!(param_count(&c), 2 * 9 + 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Linear::new(8, 4, &mut Rng::new(5));
        let b = Linear::new(8, 4, &mut Rng::new(5));
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias.data(), b.bias.data());
    }
}
