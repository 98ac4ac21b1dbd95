//! Learned embedding of the log-Mel patch into the clip-level audio feature.

use super::{Spectrogram, N_MELS, SPEC_FRAMES};
use crate::error::Result;
use crate::nn::{join, Conv3d, Linear, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default audio feature width.
pub const AUDIO_DIM: usize = 128;

/// Two strided 2-D convolutions (realized as 3-D convs with a singleton
/// temporal axis), global average pooling, and an affine map to the audio
/// feature vector.
pub struct AudioEmbedder {
    conv1: Conv3d,
    conv2: Conv3d,
    proj: Linear,
}

impl AudioEmbedder {
    pub fn new(out_dim: usize, rng: &mut Rng) -> AudioEmbedder {
        AudioEmbedder {
            conv1: Conv3d::new(1, 8, [1, 3, 3], [1, 2, 2], [1, 1, 1], [0, 1, 1], rng),
            conv2: Conv3d::new(8, 16, [1, 3, 3], [1, 2, 2], [1, 1, 1], [0, 1, 1], rng),
            proj: Linear::new(16, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Spectrogram -> audio feature vector of length `out_dim`.
    pub fn forward(&self, spec: &Spectrogram) -> Result<Tensor> {
        self.forward_tensor(spec.tensor())
    }

    /// As [`AudioEmbedder::forward`] but from a raw (96, 64) tensor; this is
    /// the differentiable entry point used in training graphs.
    pub fn forward_tensor(&self, patch: &Tensor) -> Result<Tensor> {
        // Shape is re-validated here because raw tensors bypass Spectrogram.
        if patch.shape() != [SPEC_FRAMES, N_MELS] {
            return Err(crate::error::Error::Dimension(format!(
                "audio embedder expects {SPEC_FRAMES} x {N_MELS}, got {:?}",
                patch.shape()
            )));
        }
        let x = patch.reshape(&[1, 1, SPEC_FRAMES, N_MELS])?;
        let h = self.conv1.forward(&x)?.gelu();
        let h = self.conv2.forward(&h)?.gelu();
        let pooled = h.mean_axes(&[1, 2, 3], false)?; // (16,)
        self.proj.forward_vec(&pooled)
    }
}

impl Module for AudioEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{clip_spectrogram, Waveform, SAMPLE_RATE};

    fn spec() -> Spectrogram {
        let n = SAMPLE_RATE as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| 0.4 * (std::f32::consts::TAU * 800.0 * i as f32 / n as f32).sin())
            .collect();
        clip_spectrogram(&Waveform::new(samples, SAMPLE_RATE).unwrap(), 16, 16.0).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_zero_vector() {
        let mut emb = AudioEmbedder::new(32, &mut Rng::new(1));
        emb.proj = Linear::zeros(16, 32);
        let f = emb.forward(&spec()).unwrap();
        assert_eq!(f.shape(), &[32]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_features() {
        let emb = AudioEmbedder::new(AUDIO_DIM, &mut Rng::new(2));
        let s = spec();
        let a = emb.forward(&s).unwrap();
        let b = emb.forward(&s).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_shape_is_dimension_error() {
        let emb = AudioEmbedder::new(AUDIO_DIM, &mut Rng::new(3));
        let bad = Tensor::zeros(&[80, 64]);
        assert!(matches!(
            emb.forward_tensor(&bad),
            Err(crate::error::Error::Dimension(_))
        ));
    }
}
