//! Full network assembly: encoders, per-stage interaction, predictive
//! coding on the deepest stage, and the decoder, wired from a single
//! JSON-serializable configuration.

use crate::attention::{AttentionMode, Avim};
use crate::audio::AudioEmbedder;
use crate::cpc::CpcModule;
use crate::decoder::{DecoderConfig, SalDecoder};
use crate::encoder::{Aspp, AudioBroadcast, FeaturePyramid, VideoEncoder, STAGES};
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn default_true_stages() -> [bool; STAGES] {
    [true; STAGES]
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Per-stage enablement, shallowest first.
    #[serde(default = "default_true_stages")]
    pub stages: [bool; STAGES],
    #[serde(default = "AttentionConfig::default_bilinear_rank")]
    pub bilinear_rank: usize,
}

impl AttentionConfig {
    fn default_bilinear_rank() -> usize {
        32
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mode: AttentionMode::Linear,
            stages: [true; STAGES],
            bilinear_rank: 32,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CpcConfig {
    pub enabled: bool,
    pub layers: usize,
    /// Inference iterations N; validated non-negative at the config border.
    pub iterations: i64,
    pub alpha: f32,
    /// Re-run the feedforward sweep between iterations.
    pub refresh: bool,
}

impl Default for CpcConfig {
    fn default() -> Self {
        CpcConfig { enabled: true, layers: 3, iterations: 3, alpha: 0.1, refresh: false }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Clip geometry the model is built for.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width after atrous pooling (and of every interaction stage).
    pub channels: usize,
    pub encoder_channels: [usize; STAGES],
    pub norm_groups: usize,
    pub aspp_rates: Vec<usize>,
    /// Audio feature width C_A.
    pub audio_dim: usize,
    /// When false the audio branch (and everything depending on it) is
    /// absent: the visual-only ablation.
    pub audio_enabled: bool,
    pub attention: AttentionConfig,
    pub cpc: CpcConfig,
    pub decoder_widths: [usize; STAGES],
    pub dense_layers: usize,
    pub dense_growth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 16,
            height: 64,
            width: 96,
            channels: 256,
            encoder_channels: [16, 32, 64, 128],
            norm_groups: 4,
            aspp_rates: vec![1, 2, 4],
            audio_dim: crate::audio::AUDIO_DIM,
            audio_enabled: true,
            attention: AttentionConfig::default(),
            cpc: CpcConfig::default(),
            decoder_widths: [256; STAGES],
            dense_layers: 2,
            dense_growth: 16,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale training runs; the architecture is
    /// unchanged.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            channels: 24,
            encoder_channels: [12, 16, 20, 24],
            audio_dim: 32,
            decoder_widths: [24; STAGES],
            dense_growth: 8,
            ..ModelConfig::default()
        }
    }

    /// Per-stage temporal extents for this clip length (strides 1,2,2,1).
    pub fn stage_temporal(&self) -> [usize; STAGES] {
        let t = self.frames;
        let t2 = t.div_ceil(2);
        let t4 = t2.div_ceil(2);
        [t, t2, t4, t4]
    }

    /// Spatio-temporal dims of stage i.
    pub fn stage_dims(&self, i: usize) -> [usize; 3] {
        let t = self.stage_temporal();
        [t[i], self.height >> (i + 2), self.width >> (i + 2)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "resolution {} x {} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("clip must have at least one frame".into()));
        }
        if self.cpc.iterations < 0 {
            return Err(Error::Contract(format!(
                "predictive-coding iteration count must be >= 0, got {}",
                self.cpc.iterations
            )));
        }
        if self.cpc.enabled && self.cpc.alpha <= 0.0 {
            return Err(Error::Config("predictive-coding alpha must be positive".into()));
        }
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {i} channels {c} not divisible into {} norm groups",
                    self.norm_groups
                )));
            }
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::Config(format!("invalid aspp rates {:?}", self.aspp_rates)));
        }
        Ok(())
    }

    pub fn build(&self, rng: &mut Rng) -> Result<SaliencyNet> {
        SaliencyNet::new(self.clone(), rng)
    }
}

struct AudioBranch {
    embedder: AudioEmbedder,
    broadcast: Vec<AudioBroadcast>,
    avim: Vec<Option<Avim>>,
    cpc: Option<CpcModule>,
}

/// The end-to-end saliency network for a fixed clip geometry.
pub struct SaliencyNet {
    pub cfg: ModelConfig,
    encoder: VideoEncoder,
    aspp: Vec<Aspp>,
    audio: Option<AudioBranch>,
    decoder: SalDecoder,
}

impl SaliencyNet {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<SaliencyNet> {
        cfg.validate()?;
        let encoder = VideoEncoder::new(cfg.encoder_channels, cfg.norm_groups, rng)?;
        let aspp = (0..STAGES)
            .map(|i| Aspp::new(cfg.encoder_channels[i], cfg.channels, &cfg.aspp_rates, rng))
            .collect::<Result<Vec<_>>>()?;
        let audio = if cfg.audio_enabled {
            let embedder = AudioEmbedder::new(cfg.audio_dim, rng);
            let broadcast = (0..STAGES)
                .map(|_| AudioBroadcast::new(cfg.audio_dim, cfg.channels, rng))
                .collect();
            let avim = (0..STAGES)
                .map(|i| {
                    cfg.attention.stages[i].then(|| {
                        Avim::new(
                            cfg.attention.mode,
                            cfg.channels,
                            cfg.attention.bilinear_rank.min(cfg.channels).max(1),
                            rng,
                        )
                    })
                })
                .collect();
            let cpc = if cfg.cpc.enabled {
                Some(CpcModule::new(
                    cfg.channels,
                    cfg.cpc.layers,
                    cfg.stage_dims(STAGES - 1),
                    cfg.cpc.alpha,
                    cfg.cpc.iterations as usize,
                    cfg.cpc.refresh,
                    rng,
                )?)
            } else {
                None
            };
            Some(AudioBranch { embedder, broadcast, avim, cpc })
        } else {
            None
        };
        let dec_cfg = DecoderConfig {
            widths: cfg.decoder_widths,
            dense_layers: cfg.dense_layers,
            growth: cfg.dense_growth,
            temporal: cfg.stage_temporal()[STAGES - 1],
        };
        let decoder = SalDecoder::new([cfg.channels; STAGES], dec_cfg, rng)?;
        Ok(SaliencyNet { cfg, encoder, aspp, audio, decoder })
    }

    /// Predict the clip's saliency map. `spect` is the 96 x 64 log-Mel
    /// patch; it is required exactly when the audio branch exists.
    pub fn forward(&self, clip: &Tensor, spect: Option<&Tensor>) -> Result<Tensor> {
        let want = [3, self.cfg.frames, self.cfg.height, self.cfg.width];
        if clip.shape() != want {
            return Err(Error::dim(format!(
                "clip shape {:?} does not match model geometry {:?}",
                clip.shape(),
                want
            )));
        }
        let pyr = self.encoder.forward(clip)?;
        let mut refined: Vec<Tensor> = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            refined.push(self.aspp[i].forward(&pyr.stages[i])?);
        }
        if let Some(branch) = &self.audio {
            let spect = spect.ok_or_else(|| {
                Error::Input("model has an audio branch but no spectrogram was given".into())
            })?;
            let f_a = branch.embedder.forward_tensor(spect)?;
            let mut broadcasts: Vec<Option<Tensor>> = vec![None; STAGES];
            for i in 0..STAGES {
                let needs = branch.avim[i].is_some()
                    || (i == STAGES - 1 && branch.cpc.is_some());
                if needs {
                    let dims = self.cfg.stage_dims(i);
                    broadcasts[i] = Some(branch.broadcast[i].forward(&f_a, dims)?);
                }
            }
            for i in 0..STAGES {
                if let Some(avim) = &branch.avim[i] {
                    let aud = broadcasts[i].as_ref().expect("broadcast computed");
                    refined[i] = avim.forward(&refined[i], aud)?;
                }
            }
            if let Some(cpc) = &branch.cpc {
                let aud = broadcasts[STAGES - 1].as_ref().expect("broadcast computed");
                // The corrected bottom activity replaces the deepest feature.
                refined[STAGES - 1] = cpc.infer(&refined[STAGES - 1], aud)?;
            }
        }
        let pyramid = FeaturePyramid {
            stages: refined.try_into().map_err(|_| Error::Internal("stage count".into()))?,
        };
        self.decoder.decode(&pyramid, (self.cfg.height, self.cfg.width))
    }

    /// Per-iteration predictive-coding error trace for one clip, or None
    /// when the branch is disabled. Used by the iteration-sweep tooling.
    pub fn cpc_trace(&self, clip: &Tensor, spect: &Tensor) -> Result<Option<Vec<Vec<f32>>>> {
        let Some(branch) = &self.audio else { return Ok(None) };
        let Some(cpc) = &branch.cpc else { return Ok(None) };
        let pyr = self.encoder.forward(clip)?;
        let deep = self.aspp[STAGES - 1].forward(&pyr.stages[STAGES - 1])?;
        let f_a = branch.embedder.forward_tensor(spect)?;
        let dims = self.cfg.stage_dims(STAGES - 1);
        let aud = branch.broadcast[STAGES - 1].forward(&f_a, dims)?;
        let deep = match &branch.avim[STAGES - 1] {
            Some(avim) => avim.forward(&deep, &aud)?,
            None => deep,
        };
        Ok(Some(cpc.infer_traced(&deep, &aud)?.1))
    }
}

impl Module for SaliencyNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, a) in self.aspp.iter().enumerate() {
            a.visit(&join(prefix, &format!("aspp{i}")), f);
        }
        if let Some(b) = &self.audio {
            b.embedder.visit(&join(prefix, "audio.embedder"), f);
            for (i, br) in b.broadcast.iter().enumerate() {
                br.visit(&join(prefix, &format!("audio.broadcast{i}")), f);
            }
            for (i, av) in b.avim.iter().enumerate() {
                if let Some(av) = av {
                    av.visit(&join(prefix, &format!("audio.avim{i}")), f);
                }
            }
            if let Some(c) = &b.cpc {
                c.visit(&join(prefix, "audio.cpc"), f);
            }
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, a) in self.aspp.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("aspp{i}")), f);
        }
        if let Some(b) = &mut self.audio {
            b.embedder.visit_mut(&join(prefix, "audio.embedder"), f);
            for (i, br) in b.broadcast.iter_mut().enumerate() {
                br.visit_mut(&join(prefix, &format!("audio.broadcast{i}")), f);
            }
            for (i, av) in b.avim.iter_mut().enumerate() {
                if let Some(av) = av {
                    av.visit_mut(&join(prefix, &format!("audio.avim{i}")), f);
                }
            }
            if let Some(c) = &mut b.cpc {
                c.visit_mut(&join(prefix, "audio.cpc"), f);
            }
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frames: 4,
            height: 32,
            width: 32,
            channels: 8,
            encoder_channels: [4, 4, 8, 8],
            norm_groups: 2,
            aspp_rates: vec![1, 2],
            audio_dim: 8,
            decoder_widths: [8; STAGES],
            dense_layers: 1,
            dense_growth: 4,
            cpc: CpcConfig { layers: 2, iterations: 2, ..CpcConfig::default() },
            ..ModelConfig::default()
        }
    }

    fn rand_clip(rng: &mut Rng, cfg: &ModelConfig) -> Tensor {
        let n = 3 * cfg.frames * cfg.height * cfg.width;
        Tensor::from_vec(
            &[3, cfg.frames, cfg.height, cfg.width],
            (0..n).map(|_| rng.next_f32()).collect(),
        )
        .unwrap()
    }

    fn rand_spect(rng: &mut Rng) -> Tensor {
        Tensor::from_vec(&[96, 64], (0..96 * 64).map(|_| rng.range_f32(-4.6, 2.0)).collect())
            .unwrap()
    }

    #[test]
    fn forward_shapes_and_range() {
        let mut rng = Rng::new(1);
        let cfg = tiny_cfg();
        let net = cfg.build(&mut rng).unwrap();
        let clip = rand_clip(&mut rng, &cfg);
        let spect = rand_spect(&mut rng);
        let map = net.forward(&clip, Some(&spect)).unwrap();
        assert_eq!(map.shape(), &[32, 32]);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn visual_only_ignores_audio() {
        let mut rng = Rng::new(2);
        let cfg = ModelConfig { audio_enabled: false, ..tiny_cfg() };
        let net = cfg.build(&mut rng).unwrap();
        let clip = rand_clip(&mut rng, &cfg);
        let map = net.forward(&clip, None).unwrap();
        assert_eq!(map.shape(), &[32, 32]);
        // No audio parameters exist.
        let names: Vec<String> =
            crate::nn::named_params(&net).into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("audio.")));
    }

    #[test]
    fn audio_branch_requires_spectrogram() {
        let mut rng = Rng::new(3);
        let cfg = tiny_cfg();
        let net = cfg.build(&mut rng).unwrap();
        let clip = rand_clip(&mut rng, &cfg);
        assert!(matches!(net.forward(&clip, None), Err(Error::Input(_))));
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let cfg = tiny_cfg();
        let net1 = cfg.build(&mut Rng::new(7)).unwrap();
        let net2 = cfg.build(&mut Rng::new(7)).unwrap();
        let mut rng = Rng::new(8);
        let clip = rand_clip(&mut rng, &cfg);
        let spect = rand_spect(&mut rng);
        let a = net1.forward(&clip, Some(&spect)).unwrap();
        let b = net2.forward(&clip, Some(&spect)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn negative_iterations_is_contract_error() {
        let cfg = ModelConfig {
            cpc: CpcConfig { iterations: -1, ..CpcConfig::default() },
            ..tiny_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_clip_geometry_is_dimension_error() {
        let mut rng = Rng::new(4);
        let cfg = tiny_cfg();
        let net = cfg.build(&mut rng).unwrap();
        let bad = Tensor::zeros(&[3, 4, 64, 32]);
        assert!(matches!(net.forward(&bad, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn ablation_configs_change_parameter_sets() {
        let mut rng = Rng::new(5);
        let full = tiny_cfg().build(&mut rng).unwrap();
        let no_cpc = ModelConfig {
            cpc: CpcConfig { enabled: false, ..CpcConfig::default() },
            ..tiny_cfg()
        }
        .build(&mut rng)
        .unwrap();
        assert!(param_count(&full) > param_count(&no_cpc));
    }

    #[test]
    fn cpc_trace_has_n_plus_one_rows() {
        let mut rng = Rng::new(6);
        let cfg = tiny_cfg();
        let net = cfg.build(&mut rng).unwrap();
        let clip = rand_clip(&mut rng, &cfg);
        let spect = rand_spect(&mut rng);
        let trace = net.cpc_trace(&clip, &spect).unwrap().unwrap();
        assert_eq!(trace.len(), cfg.cpc.iterations as usize + 1);
        assert_eq!(trace[0].len(), cfg.cpc.layers - 1);
    }
}
