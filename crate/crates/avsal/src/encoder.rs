//! Visual encoding: hierarchical feature pyramid, atrous pyramid pooling,
//! and the audio-feature broadcast that matches audio to each stage.

use crate::error::{Error, Result};
use crate::nn::{join, Conv3d, GroupNorm, Linear, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of pyramid stages.
pub const STAGES: usize = 4;

/// Four per-stage spatio-temporal features; stage `i` (0-based) has spatial
/// extents `(H, W) / 2^(i+2)`.
pub struct FeaturePyramid {
    pub stages: [Tensor; STAGES],
}

impl FeaturePyramid {
    /// Spatial extents stage `i` must have for an (H, W) input.
    pub fn expected_spatial(h: usize, w: usize, i: usize) -> (usize, usize) {
        (h >> (i + 2), w >> (i + 2))
    }
}

/// Hierarchical video encoder: a stride-2 stem followed by four
/// conv -> group norm -> GELU stages, spatially halving at every step so
/// stage `i` lands at 1/2^(i+2) of the input resolution. Temporal strides
/// are (1, 2, 2, 1), giving per-stage temporal extents (T, T/2, T/4, T/4)
/// for even T.
pub struct VideoEncoder {
    stem: Conv3d,
    stage_convs: Vec<Conv3d>,
    stage_norms: Vec<GroupNorm>,
}

/// Per-stage channel widths.
pub type StageWidths = [usize; STAGES];

impl VideoEncoder {
    pub fn new(widths: StageWidths, norm_groups: usize, rng: &mut Rng) -> Result<VideoEncoder> {
        let temporal_strides = [1usize, 2, 2, 1];
        let stem = Conv3d::new(3, widths[0], [1, 3, 3], [1, 2, 2], [1, 1, 1], [0, 1, 1], rng);
        let mut stage_convs = Vec::with_capacity(STAGES);
        let mut stage_norms = Vec::with_capacity(STAGES);
        let mut in_ch = widths[0];
        for i in 0..STAGES {
            stage_convs.push(Conv3d::new(
                in_ch,
                widths[i],
                [3, 3, 3],
                [temporal_strides[i], 2, 2],
                [1, 1, 1],
                [1, 1, 1],
                rng,
            ));
            stage_norms.push(GroupNorm::new(norm_groups, widths[i])?);
            in_ch = widths[i];
        }
        Ok(VideoEncoder { stem, stage_convs, stage_norms })
    }

    /// Encode a (3, T, H, W) clip with values in [0, 1]; H and W must be
    /// divisible by 32 so every stage extent is exact.
    pub fn forward(&self, clip: &Tensor) -> Result<FeaturePyramid> {
        let s = clip.shape();
        if clip.rank() != 4 || s[0] != 3 {
            return Err(Error::dim(format!("clip must be (3, T, H, W), got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::dim(format!(
                "clip spatial extents {h} x {w} must be divisible by 32"
            )));
        }
        let mut x = self.stem.forward(clip)?;
        let mut stages: Vec<Tensor> = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            x = self.stage_convs[i].forward(&x)?;
            x = self.stage_norms[i].forward(&x)?;
            x = x.gelu();
            stages.push(x.clone());
        }
        for (i, st) in stages.iter().enumerate() {
            let (eh, ew) = FeaturePyramid::expected_spatial(h, w, i);
            debug_assert_eq!(&st.shape()[2..], &[eh, ew], "stage {i} spatial law");
        }
        let stages: [Tensor; STAGES] = stages.try_into().map_err(|_| {
            Error::Internal("encoder did not produce four stages".into())
        })?;
        Ok(FeaturePyramid { stages })
    }
}

impl Module for VideoEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, (c, n)) in self.stage_convs.iter().zip(&self.stage_norms).enumerate() {
            c.visit(&join(prefix, &format!("stage{i}.conv")), f);
            n.visit(&join(prefix, &format!("stage{i}.norm")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, (c, n)) in
            self.stage_convs.iter_mut().zip(self.stage_norms.iter_mut()).enumerate()
        {
            c.visit_mut(&join(prefix, &format!("stage{i}.conv")), f);
            n.visit_mut(&join(prefix, &format!("stage{i}.norm")), f);
        }
    }
}

// ---------------------------------------------------------------------------

/// Atrous spatial pyramid pooling: parallel spatially-dilated (1, 3, 3)
/// branches plus a 1x1x1 branch, concatenated and projected to a fixed
/// channel width. Spatial and temporal extents are preserved.
pub struct Aspp {
    pub rates: Vec<usize>,
    branches: Vec<Conv3d>,
    point: Conv3d,
    project: Conv3d,
    out_ch: usize,
}

impl Aspp {
    pub fn new(in_ch: usize, out_ch: usize, rates: &[usize], rng: &mut Rng) -> Result<Aspp> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::Config(format!("aspp rates {rates:?} must be >= 1")));
        }
        let branches = rates
            .iter()
            .map(|&d| {
                Conv3d::new(in_ch, out_ch, [1, 3, 3], [1, 1, 1], [1, d, d], [0, d, d], rng)
            })
            .collect();
        let point = Conv3d::new(in_ch, out_ch, [1, 1, 1], [1, 1, 1], [1, 1, 1], [0, 0, 0], rng);
        let project = Conv3d::new(
            (rates.len() + 1) * out_ch,
            out_ch,
            [1, 1, 1],
            [1, 1, 1],
            [1, 1, 1],
            [0, 0, 0],
            rng,
        );
        Ok(Aspp { rates: rates.to_vec(), branches, point, project, out_ch })
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    /// Per-branch outputs before concatenation, in order: dilated branches
    /// by rate, then the 1x1x1 branch. Exposed so equivalence tests can
    /// rebuild the module output by hand.
    pub fn branch_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.forward(x)?);
        }
        outs.push(self.point.forward(x)?);
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self.branch_outputs(x)?;
        let refs: Vec<&Tensor> = outs.iter().collect();
        let cat = Tensor::concat(&refs, 0)?;
        self.project.forward(&cat)
    }
}

impl Module for Aspp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.point.visit(&join(prefix, "point"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.point.visit_mut(&join(prefix, "point"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

// ---------------------------------------------------------------------------

/// Affine map from the audio feature vector to a stage's channel width,
/// replicated at every spatio-temporal site of the stage.
pub struct AudioBroadcast {
    pub affine: Linear,
}

impl AudioBroadcast {
    pub fn new(audio_dim: usize, channels: usize, rng: &mut Rng) -> AudioBroadcast {
        AudioBroadcast { affine: Linear::new(audio_dim, channels, rng) }
    }

    /// (C_A,) -> (C, T, h, w) with every spatial slice identical.
    pub fn forward(&self, audio: &Tensor, stage_shape: [usize; 3]) -> Result<Tensor> {
        let c = self.affine.out_dim();
        let [t, h, w] = stage_shape;
        let v = self.affine.forward_vec(audio)?;
        v.reshape(&[c, 1, 1, 1])?.expand(&[c, t, h, w])
    }
}

impl Module for AudioBroadcast {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.affine.visit(&join(prefix, "affine"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.affine.visit_mut(&join(prefix, "affine"), f);
    }
}
