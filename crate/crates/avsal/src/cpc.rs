//! Consistency-correcting predictive coding over the deepest stage.
//!
//! A hierarchy of L variable units mu_0..mu_{L-1} sits on top of the fused
//! audio-visual feature. Bottom-up maps f_phi (strided convolutions)
//! initialize the hierarchy in one feedforward sweep; top-down maps f_theta
//! (transposed convolutions) predict each layer from the one above, and the
//! squared prediction error per layer,
//! eps_i = mean((mu_i - f_theta_i(mu_{i+1}))^2),
//! is reduced by explicit gradient steps on the mu's. Each non-top layer
//! descends the total error it participates in (eps_i and eps_{i-1}); the
//! top layer is frozen after feedforward. Because f_theta is linear, the
//! inner objective is an exact quadratic in the mu's and the update
//! direction has a closed form built from forward ops only -- the whole
//! N-step inference therefore stays differentiable end-to-end for training.
//!
//! After the final iteration the corrected bottom activity mu_0 replaces
//! the fused feature on the path to the decoder.

use crate::error::{Error, Result};
use crate::nn::{join, Conv3d, ConvTranspose3d, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Nonlinearity applied inside the bottom-up maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedforwardActivation {
    Gelu,
    Identity,
}

/// Per-layer variable units and the most recent per-layer errors.
/// `eps` is empty until the first iteration runs.
pub struct CpcState {
    pub mu: Vec<Tensor>,
    pub eps: Vec<f32>,
}

impl CpcState {
    /// Sum of per-layer prediction errors from the last iteration.
    pub fn total_eps(&self) -> f32 {
        self.eps.iter().sum()
    }
}

/// The hierarchy parameters: a 1x1x1 fusion of the two modalities into the
/// bottom layer, one strided conv per upward edge, one transposed conv per
/// downward edge.
pub struct CpcModule {
    pub channels: usize,
    pub alpha: f32,
    pub iterations: usize,
    pub refresh: bool,
    pub activation: FeedforwardActivation,
    fusion: Conv3d,
    feedforward: Vec<Conv3d>,
    topdown: Vec<ConvTranspose3d>,
    layer_dims: Vec<[usize; 3]>,
}

impl CpcModule {
    /// Build a hierarchy of `layers` levels over a bottom feature of shape
    /// (channels, dims). Spatial extents halve per level; temporal extent is
    /// preserved. Construction fails if the shape chain cannot be realized.
    pub fn new(
        channels: usize,
        layers: usize,
        base_dims: [usize; 3],
        alpha: f32,
        iterations: usize,
        refresh: bool,
        rng: &mut Rng,
    ) -> Result<CpcModule> {
        if layers < 2 {
            return Err(Error::Config(format!(
                "predictive coding needs at least 2 layers, got {layers}"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::Config(format!("step size alpha must be positive, got {alpha}")));
        }
        let fusion =
            Conv3d::new(2 * channels, channels, [1, 1, 1], [1, 1, 1], [1, 1, 1], [0, 0, 0], rng);
        let mut layer_dims = vec![base_dims];
        let mut feedforward = Vec::new();
        let mut topdown = Vec::new();
        for i in 1..layers {
            let below = layer_dims[i - 1];
            let up = Conv3d::new(
                channels,
                channels,
                [1, 3, 3],
                [1, 2, 2],
                [1, 1, 1],
                [0, 1, 1],
                rng,
            );
            let mut dims = [0usize; 3];
            dims[0] = below[0];
            for ax in 1..3 {
                dims[ax] = crate::tensor::kernels::conv_out_extent(below[ax], 3, 2, 1, 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "layer {i} spatial extent collapsed below the kernel: {below:?}"
                        ))
                    })?;
            }
            // Match the downward map's output extent to the layer below.
            let mut out_pad = [0usize; 3];
            for ax in 1..3 {
                let base = (dims[ax] - 1) * 2 + 3 - 2;
                if below[ax] < base || below[ax] - base >= 2 {
                    return Err(Error::Config(format!(
                        "cannot invert halving {:?} -> {:?} on axis {ax}",
                        below, dims
                    )));
                }
                out_pad[ax] = below[ax] - base;
            }
            let down = ConvTranspose3d::new(
                channels,
                channels,
                [1, 3, 3],
                [1, 2, 2],
                [0, 1, 1],
                out_pad,
                rng,
            );
            layer_dims.push(dims);
            feedforward.push(up);
            topdown.push(down);
        }
        Ok(CpcModule {
            channels,
            alpha,
            iterations,
            refresh,
            activation: FeedforwardActivation::Gelu,
            fusion,
            feedforward,
            topdown,
            layer_dims,
        })
    }

    pub fn layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn layer_dims(&self) -> &[[usize; 3]] {
        &self.layer_dims
    }

    /// Direct access to a downward map, for fixed-point constructions.
    pub fn topdown_map(&self, i: usize) -> &ConvTranspose3d {
        &self.topdown[i]
    }

    pub fn topdown_map_mut(&mut self, i: usize) -> &mut ConvTranspose3d {
        &mut self.topdown[i]
    }

    pub fn feedforward_map_mut(&mut self, i: usize) -> &mut Conv3d {
        &mut self.feedforward[i]
    }

    fn activate(&self, x: Tensor) -> Tensor {
        match self.activation {
            FeedforwardActivation::Gelu => x.gelu(),
            FeedforwardActivation::Identity => x,
        }
    }

    fn check_bottom(&self, bottom: &Tensor) -> Result<()> {
        let want = [
            self.channels,
            self.layer_dims[0][0],
            self.layer_dims[0][1],
            self.layer_dims[0][2],
        ];
        if bottom.shape() != want {
            return Err(Error::dim(format!(
                "bottom layer expects {:?}, got {:?}",
                want,
                bottom.shape()
            )));
        }
        Ok(())
    }

    /// Bottom-up initialization: mu_i = f_phi(mu_{i-1}).
    pub fn feedforward(&self, bottom: &Tensor) -> Result<CpcState> {
        self.check_bottom(bottom)?;
        let mut mu = vec![bottom.clone()];
        for up in &self.feedforward {
            let next = self.activate(up.forward(mu.last().unwrap())?);
            mu.push(next);
        }
        Ok(CpcState { mu, eps: Vec::new() })
    }

    /// Per-layer prediction errors of a state, without updating it.
    pub fn errors(&self, state: &CpcState) -> Result<Vec<f32>> {
        let mut eps = Vec::with_capacity(self.layers() - 1);
        for i in 0..self.layers() - 1 {
            let pred = self.topdown[i].forward(&state.mu[i + 1])?;
            let resid = state.mu[i].sub(&pred)?;
            eps.push(resid.mul(&resid)?.mean_all().item());
        }
        Ok(eps)
    }

    /// Closed-form gradients of the total prediction error with respect to
    /// each non-top mu, together with the per-layer errors of the current
    /// state. The gradient through a downward map is its adjoint, which for
    /// a transposed convolution is the matching forward convolution with the
    /// same weight tensor -- so the directions are ordinary graph ops and
    /// the outer training gradient flows through them.
    pub fn update_directions(&self, state: &CpcState) -> Result<(Vec<Tensor>, Vec<f32>)> {
        let l = self.layers();
        let mut residuals = Vec::with_capacity(l - 1);
        let mut eps = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let pred = self.topdown[i].forward(&state.mu[i + 1])?;
            let resid = state.mu[i].sub(&pred)?;
            eps.push(resid.mul(&resid)?.mean_all().item());
            residuals.push(resid);
        }
        let mut grads = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let n_i = residuals[i].len() as f32;
            let mut g = residuals[i].scale(2.0 / n_i);
            if i > 0 {
                let td = &self.topdown[i - 1];
                let n_below = residuals[i - 1].len() as f32;
                // Adjoint of the downward map: conv with the deconv's weight.
                let pull = residuals[i - 1].conv3d(
                    &td.weight,
                    None,
                    td.stride,
                    [1, 1, 1],
                    td.padding,
                )?;
                g = g.sub(&pull.scale(2.0 / n_below))?;
            }
            grads.push(g);
        }
        Ok((grads, eps))
    }

    /// One inference step: record per-layer errors, then move every non-top
    /// layer one gradient step of size alpha against the total error. All
    /// layers update simultaneously from the same pre-update state.
    pub fn iterate(&self, state: &CpcState) -> Result<CpcState> {
        let (grads, eps) = self.update_directions(state)?;
        let mut mu = Vec::with_capacity(self.layers());
        for (i, m) in state.mu.iter().enumerate() {
            if i < grads.len() {
                mu.push(m.sub(&grads[i].scale(self.alpha))?);
            } else {
                mu.push(m.clone());
            }
        }
        Ok(CpcState { mu, eps })
    }

    /// Fuse the two stage-shaped modality features into the bottom layer.
    pub fn fuse(&self, vis: &Tensor, aud: &Tensor) -> Result<Tensor> {
        if vis.shape() != aud.shape() {
            return Err(Error::dim(format!(
                "fusion shapes differ: {:?} vs {:?}",
                vis.shape(),
                aud.shape()
            )));
        }
        self.fusion.forward(&Tensor::concat(&[vis, aud], 0)?)
    }

    /// Full inference: fuse, feedforward, N iterations (optionally
    /// re-running the feedforward sweep from the corrected bottom between
    /// iterations), then return the bottom activity. The result has the
    /// same shape as `vis`.
    pub fn infer(&self, vis: &Tensor, aud: &Tensor) -> Result<Tensor> {
        Ok(self.infer_traced(vis, aud)?.0)
    }

    /// As [`CpcModule::infer`], also returning the per-layer error trace:
    /// entry k holds the errors of the state after k update steps
    /// (entry 0 is the feedforward state), so the trace has N+1 rows.
    pub fn infer_traced(&self, vis: &Tensor, aud: &Tensor) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let bottom = self.fuse(vis, aud)?;
        let mut state = self.feedforward(&bottom)?;
        let mut trace = vec![self.errors(&state)?];
        for n in 0..self.iterations {
            if self.refresh && n > 0 {
                let mut refreshed = self.feedforward(&state.mu[0])?;
                refreshed.eps = state.eps;
                state = refreshed;
            }
            state = self.iterate(&state)?;
            trace.push(self.errors(&state)?);
        }
        Ok((state.mu.swap_remove(0), trace))
    }
}

impl Module for CpcModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        for (i, up) in self.feedforward.iter().enumerate() {
            up.visit(&join(prefix, &format!("up{i}")), f);
        }
        for (i, down) in self.topdown.iter().enumerate() {
            down.visit(&join(prefix, &format!("down{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        for (i, up) in self.feedforward.iter_mut().enumerate() {
            up.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        for (i, down) in self.topdown.iter_mut().enumerate() {
            down.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
    }
}
