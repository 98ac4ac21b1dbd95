//! Multi-scale saliency decoder.
//!
//! Four blocks run deepest-first. Each block pushes its stage feature
//! through a small dense block (every internal layer sees the concatenation
//! of all previous outputs) and aligns it to the common decoder temporal
//! size; blocks other than the deepest then fuse in the previous block's
//! output by upsampling and elementwise summation, and every block finishes
//! with a norm -> ReLU -> 3-D conv feature-generation step. The shallowest
//! block collapses time, applies the final convolution, upsamples to the
//! clip resolution and squashes through a sigmoid.
//!
//! `UnetDecoderStub` and `FcnDecoderStub` exist only to compare parameter
//! counts against this decoder at matched widths.

use crate::encoder::{FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::nn::{join, param_count, Conv3d, GroupNorm, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Output width of each block, shallowest (dec 1) first.
    pub widths: [usize; STAGES],
    /// Internal layers per dense block.
    pub dense_layers: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Common temporal extent features are aligned to.
    pub temporal: usize,
}

impl DecoderConfig {
    pub fn for_channels(channels: usize, temporal: usize) -> DecoderConfig {
        DecoderConfig {
            widths: [channels; STAGES],
            dense_layers: 2,
            growth: 16,
            temporal,
        }
    }
}

/// Densely-connected refinement: layer j maps the concatenation of the
/// input and all previous layer outputs to `growth` new channels through
/// norm -> ReLU -> (1,3,3) conv; the concatenated stack is projected to the
/// block width, then the temporal axis is resized to the decoder's common
/// extent. With zero layers and matching widths the block is the identity
/// plus temporal alignment.
pub struct DenseBlock {
    pub(crate) layers: Vec<(GroupNorm, Conv3d)>,
    pub(crate) project: Option<Conv3d>,
    in_ch: usize,
    temporal: usize,
}

impl DenseBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        dense_layers: usize,
        growth: usize,
        temporal: usize,
        rng: &mut Rng,
    ) -> Result<DenseBlock> {
        let n_layers = if growth == 0 { 0 } else { dense_layers };
        let mut layers = Vec::with_capacity(n_layers);
        for j in 0..n_layers {
            let ch = in_ch + j * growth;
            layers.push((
                GroupNorm::new(ch, ch)?,
                Conv3d::new(ch, growth, [1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1], rng),
            ));
        }
        let concat_ch = in_ch + n_layers * growth;
        let project = if concat_ch == out_ch && n_layers == 0 {
            None
        } else {
            Some(Conv3d::new(concat_ch, out_ch, [1, 1, 1], [1, 1, 1], [1, 1, 1], [0, 0, 0], rng))
        };
        Ok(DenseBlock { layers, project, in_ch, temporal })
    }

    /// Channel count of the concatenated stack before projection.
    pub fn concat_channels(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth_per_layer()
    }

    fn growth_per_layer(&self) -> usize {
        self.layers.first().map_or(0, |(_, c)| c.out_ch())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut stack = x.clone();
        for (norm, conv) in &self.layers {
            let y = conv.forward(&norm.forward(&stack)?.relu())?;
            stack = Tensor::concat(&[&stack, &y], 0)?;
        }
        let projected = match &self.project {
            Some(p) => p.forward(&stack)?,
            None => stack,
        };
        let s = projected.shape();
        projected.upsample_trilinear([self.temporal, s[2], s[3]])
    }
}

impl Module for DenseBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (j, (n, c)) in self.layers.iter().enumerate() {
            n.visit(&join(prefix, &format!("layer{j}.norm")), f);
            c.visit(&join(prefix, &format!("layer{j}.conv")), f);
        }
        if let Some(p) = &self.project {
            p.visit(&join(prefix, "project"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (j, (n, c)) in self.layers.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("layer{j}.norm")), f);
            c.visit_mut(&join(prefix, &format!("layer{j}.conv")), f);
        }
        if let Some(p) = &mut self.project {
            p.visit_mut(&join(prefix, "project"), f);
        }
    }
}

/// Merge the deeper block's output into the current one: spatial upsample,
/// channel projection when widths differ, elementwise sum.
pub struct FusionBlock {
    pub(crate) project: Option<Conv3d>,
}

impl FusionBlock {
    pub fn new(prev_ch: usize, cur_ch: usize, rng: &mut Rng) -> FusionBlock {
        let project = if prev_ch == cur_ch {
            None
        } else {
            Some(Conv3d::new(prev_ch, cur_ch, [1, 1, 1], [1, 1, 1], [1, 1, 1], [0, 0, 0], rng))
        };
        FusionBlock { project }
    }

    pub fn forward(&self, prev: &Tensor, cur: &Tensor) -> Result<Tensor> {
        let cs = cur.shape();
        let up = prev.upsample_trilinear([cs[1], cs[2], cs[3]])?;
        let matched = match &self.project {
            Some(p) => p.forward(&up)?,
            None => {
                if up.shape()[0] != cs[0] {
                    return Err(Error::Config(format!(
                        "fusion built without projection cannot reconcile {} vs {} channels",
                        up.shape()[0],
                        cs[0]
                    )));
                }
                up
            }
        };
        matched.add(cur)
    }
}

impl Module for FusionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(p) = &self.project {
            p.visit(&join(prefix, "project"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = &mut self.project {
            p.visit_mut(&join(prefix, "project"), f);
        }
    }
}

/// Norm -> ReLU -> 3-D convolution, extents preserved.
pub struct FeatureGen {
    pub(crate) norm: GroupNorm,
    pub(crate) conv: Conv3d,
}

impl FeatureGen {
    pub fn new(ch: usize, rng: &mut Rng) -> Result<FeatureGen> {
        Ok(FeatureGen {
            norm: GroupNorm::new(ch, ch)?,
            conv: Conv3d::same(ch, ch, [3, 3, 3], rng),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.norm.forward(x)?.relu())
    }
}

impl Module for FeatureGen {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// The four-block decoder producing one (H, W) map in [0, 1] per clip.
pub struct SalDecoder {
    dense: Vec<DenseBlock>,
    fusion: Vec<FusionBlock>,
    feature: Vec<FeatureGen>,
    head: Conv3d,
    cfg: DecoderConfig,
}

impl SalDecoder {
    /// `stage_channels` are the channel widths of the incoming pyramid
    /// features, shallowest first.
    pub fn new(
        stage_channels: [usize; STAGES],
        cfg: DecoderConfig,
        rng: &mut Rng,
    ) -> Result<SalDecoder> {
        let mut dense = Vec::with_capacity(STAGES);
        let mut feature = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            dense.push(DenseBlock::new(
                stage_channels[i],
                cfg.widths[i],
                cfg.dense_layers,
                cfg.growth,
                cfg.temporal,
                rng,
            )?);
            feature.push(FeatureGen::new(cfg.widths[i], rng)?);
        }
        // Blocks 0..2 fuse the deeper block's output.
        let fusion = (0..STAGES - 1)
            .map(|i| FusionBlock::new(cfg.widths[i + 1], cfg.widths[i], rng))
            .collect();
        let head = Conv3d::new(cfg.widths[0], 1, [1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1], rng);
        Ok(SalDecoder { dense, fusion, feature, head, cfg })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Decode the (post-interaction) pyramid into a full-resolution map.
    pub fn decode(&self, pyramid: &FeaturePyramid, resolution: (usize, usize)) -> Result<Tensor> {
        let (h, w) = resolution;
        for (i, st) in pyramid.stages.iter().enumerate() {
            let (eh, ew) = FeaturePyramid::expected_spatial(h, w, i);
            if st.shape()[2] != eh || st.shape()[3] != ew {
                return Err(Error::dim(format!(
                    "stage {i} is {:?}, expected spatial ({eh}, {ew}) for output {h} x {w}",
                    st.shape()
                )));
            }
        }
        let mut prev: Option<Tensor> = None;
        for i in (0..STAGES).rev() {
            let mut x = self.dense[i].forward(&pyramid.stages[i])?;
            if let Some(p) = &prev {
                x = self.fusion[i].forward(p, &x)?;
            }
            prev = Some(self.feature[i].forward(&x)?);
        }
        let x = prev.expect("decoder ran no blocks");
        let collapsed = x.mean_axes(&[1], true)?;
        let logits = self.head.forward(&collapsed)?;
        let up = logits.upsample_trilinear([1, h, w])?;
        Ok(up.sigmoid().reshape(&[h, w])?)
    }
}

impl Module for SalDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for i in 0..STAGES {
            self.dense[i].visit(&join(prefix, &format!("dec{i}.dense")), f);
            if i < STAGES - 1 {
                self.fusion[i].visit(&join(prefix, &format!("dec{i}.fusion")), f);
            }
            self.feature[i].visit(&join(prefix, &format!("dec{i}.feature")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for i in 0..STAGES {
            self.dense[i].visit_mut(&join(prefix, &format!("dec{i}.dense")), f);
            if i < STAGES - 1 {
                self.fusion[i].visit_mut(&join(prefix, &format!("dec{i}.fusion")), f);
            }
            self.feature[i].visit_mut(&join(prefix, &format!("dec{i}.feature")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

// ---------------------------------------------------------------------------
// Parameter-count stubs for the decoder comparison.

/// U-Net-style decoder at the same widths: per level, upsample + concat the
/// skip feature + two same-padded 3x3x3 convolutions with norms. Only its
/// parameter count is used.
pub struct UnetDecoderStub {
    convs: Vec<Conv3d>,
    norms: Vec<GroupNorm>,
    head: Conv3d,
}

impl UnetDecoderStub {
    pub fn new(
        stage_channels: [usize; STAGES],
        widths: [usize; STAGES],
        rng: &mut Rng,
    ) -> Result<UnetDecoderStub> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut prev = stage_channels[STAGES - 1];
        for i in (0..STAGES).rev() {
            let skip = stage_channels[i];
            let in_ch = if i == STAGES - 1 { prev } else { prev + skip };
            convs.push(Conv3d::same(in_ch, widths[i], [3, 3, 3], rng));
            norms.push(GroupNorm::new(widths[i], widths[i])?);
            convs.push(Conv3d::same(widths[i], widths[i], [3, 3, 3], rng));
            norms.push(GroupNorm::new(widths[i], widths[i])?);
            prev = widths[i];
        }
        let head = Conv3d::new(prev, 1, [1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1], rng);
        Ok(UnetDecoderStub { convs, norms, head })
    }
}

impl Module for UnetDecoderStub {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norm{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norm{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Plain deconvolution chain (deconv + ReLU + norm per level) from the
/// deepest stage straight to the output; no skips. Parameter count only.
pub struct FcnDecoderStub {
    deconvs: Vec<crate::nn::ConvTranspose3d>,
    norms: Vec<GroupNorm>,
    head: Conv3d,
}

impl FcnDecoderStub {
    pub fn new(
        stage_channels: [usize; STAGES],
        widths: [usize; STAGES],
        rng: &mut Rng,
    ) -> Result<FcnDecoderStub> {
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut prev = stage_channels[STAGES - 1];
        for i in (0..STAGES).rev() {
            deconvs.push(crate::nn::ConvTranspose3d::new(
                prev,
                widths[i],
                [1, 3, 3],
                [1, 2, 2],
                [0, 1, 1],
                [0, 1, 1],
                rng,
            ));
            norms.push(GroupNorm::new(widths[i], widths[i])?);
            prev = widths[i];
        }
        let head = Conv3d::new(prev, 1, [1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1], rng);
        Ok(FcnDecoderStub { deconvs, norms, head })
    }
}

impl Module for FcnDecoderStub {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.deconvs.iter().enumerate() {
            c.visit(&join(prefix, &format!("deconv{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norm{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.deconvs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("deconv{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norm{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Parameter totals for the three decoder architectures at matched widths.
pub fn decoder_parameter_comparison(
    stage_channels: [usize; STAGES],
    cfg: &DecoderConfig,
) -> Result<(usize, usize, usize)> {
    let mut rng = Rng::new(0);
    let sal = SalDecoder::new(stage_channels, cfg.clone(), &mut rng)?;
    let unet = UnetDecoderStub::new(stage_channels, cfg.widths, &mut rng)?;
    let fcn = FcnDecoderStub::new(stage_channels, cfg.widths, &mut rng)?;
    Ok((param_count(&sal), param_count(&unet), param_count(&fcn)))
}
