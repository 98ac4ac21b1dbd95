//! Mel filterbank and log-Mel features.

use super::{F_MAX, F_MIN, LOG_FLOOR, N_MELS, SAMPLE_RATE, SPEC_FRAMES, WIN_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10.0f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over one-sided DFT bins.
pub struct MelFilterbank {
    pub n_mels: usize,
    pub f_min: f32,
    pub f_max: f32,
    /// (n_mels, bins) filter weights, each triangle peaking at 1.
    pub weights: Vec<f32>,
    pub bins: usize,
    /// Center frequency of each band, ascending.
    pub centers_hz: Vec<f32>,
}

impl MelFilterbank {
    pub fn new(
        n_mels: usize,
        f_min: f32,
        f_max: f32,
        sample_rate: u32,
        n_fft: usize,
    ) -> Result<MelFilterbank> {
        if !(0.0..f_max).contains(&f_min) || f_max > sample_rate as f32 / 2.0 {
            return Err(Error::Config(format!(
                "mel band edges {f_min}..{f_max} invalid for rate {sample_rate}"
            )));
        }
        let bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let edges_hz: Vec<f32> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (n_mels + 1) as f32))
            .collect();
        let bin_hz: Vec<f32> = (0..bins)
            .map(|k| k as f32 * sample_rate as f32 / n_fft as f32)
            .collect();
        let mut weights = vec![0.0f32; n_mels * bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let mut support = 0usize;
            for (k, &f) in bin_hz.iter().enumerate() {
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    support += 1;
                }
                weights[m * bins + k] = w;
            }
            if support == 0 {
                return Err(Error::Config(format!(
                    "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no DFT bin"
                )));
            }
        }
        Ok(MelFilterbank {
            n_mels,
            f_min,
            f_max,
            weights,
            bins,
            centers_hz: edges_hz[1..=n_mels].to_vec(),
        })
    }

    /// The standard 64-band 125-7500 Hz bank over 25 ms windows at 16 kHz.
    pub fn standard() -> Result<MelFilterbank> {
        MelFilterbank::new(N_MELS, F_MIN, F_MAX, SAMPLE_RATE, WIN_LEN)
    }

    /// Bands whose support overlaps frequency `hz`.
    pub fn bands_covering(&self, hz: f32, n_fft: usize, sample_rate: u32) -> Vec<usize> {
        let mut out = Vec::new();
        for m in 0..self.n_mels {
            let row = &self.weights[m * self.bins..(m + 1) * self.bins];
            for (k, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    let f = k as f32 * sample_rate as f32 / n_fft as f32;
                    if (f - hz).abs() <= sample_rate as f32 / n_fft as f32 {
                        out.push(m);
                        break;
                    }
                }
            }
        }
        out
    }
}

/// Log-Mel feature patch: 96 time frames x 64 bands.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    frames: Tensor,
}

impl Spectrogram {
    pub fn from_tensor(t: Tensor) -> Result<Spectrogram> {
        if t.shape() != [SPEC_FRAMES, N_MELS] {
            return Err(Error::dim(format!(
                "spectrogram must be {SPEC_FRAMES} x {N_MELS}, got {:?}",
                t.shape()
            )));
        }
        t.assert_finite("spectrogram")?;
        Ok(Spectrogram { frames: t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }
}

/// Project magnitudes through the filterbank and compress:
/// `ln(fb . mag^2 + LOG_FLOOR)`, then center-fit the time axis to
/// exactly 96 frames (short inputs are padded with the silence value
/// `ln(LOG_FLOOR)` split evenly on both sides).
pub fn log_mel(mag: &Tensor, fb: &MelFilterbank) -> Result<Spectrogram> {
    if mag.rank() != 2 || mag.shape()[1] != fb.bins {
        return Err(Error::dim(format!(
            "magnitudes {:?} do not match filterbank with {} bins",
            mag.shape(),
            fb.bins
        )));
    }
    let frames = mag.shape()[0];
    let bins = fb.bins;
    let mut full = vec![0.0f32; frames * fb.n_mels];
    for f in 0..frames {
        let row = &mag.data()[f * bins..(f + 1) * bins];
        for m in 0..fb.n_mels {
            let w = &fb.weights[m * bins..(m + 1) * bins];
            let mut acc = 0.0f64;
            for (wv, &x) in w.iter().zip(row) {
                acc += (*wv as f64) * (x as f64) * (x as f64);
            }
            full[f * fb.n_mels + m] = ((acc + LOG_FLOOR as f64).ln()) as f32;
        }
    }

    let silence = LOG_FLOOR.ln();
    let mut fitted = vec![silence; SPEC_FRAMES * fb.n_mels];
    if frames >= SPEC_FRAMES {
        let start = (frames - SPEC_FRAMES) / 2;
        fitted.copy_from_slice(
            &full[start * fb.n_mels..(start + SPEC_FRAMES) * fb.n_mels],
        );
    } else {
        let start = (SPEC_FRAMES - frames) / 2;
        fitted[start * fb.n_mels..(start + frames) * fb.n_mels].copy_from_slice(&full);
    }
    Spectrogram::from_tensor(Tensor::from_vec(&[SPEC_FRAMES, N_MELS], fitted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft_magnitude, Waveform, HOP};

    #[test]
    fn filterbank_invariants() {
        let fb = MelFilterbank::standard().unwrap();
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        // Peaks strictly increase in frequency.
        for pair in fb.centers_hz.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        // Every filter touches at least one bin (checked at construction,
        // re-asserted here on the built bank).
        for m in 0..fb.n_mels {
            assert!(fb.weights[m * fb.bins..(m + 1) * fb.bins].iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn zero_magnitudes_hit_the_log_floor() {
        let fb = MelFilterbank::standard().unwrap();
        let mag = Tensor::zeros(&[100, fb.bins]);
        let spec = log_mel(&mag, &fb).unwrap();
        let expect = LOG_FLOOR.ln();
        assert!(spec.tensor().data().iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let fb = MelFilterbank::standard().unwrap();
        let mut rng = crate::rng::Rng::new(8);
        let n = SAMPLE_RATE as usize;
        let base: Vec<f32> = (0..n).map(|_| rng.range_f32(-0.45, 0.45)).collect();
        let loud: Vec<f32> = base.iter().map(|v| v * 2.0).collect();
        let sa = log_mel(
            &stft_magnitude(&Waveform::new(base, SAMPLE_RATE).unwrap(), WIN_LEN, HOP).unwrap(),
            &fb,
        )
        .unwrap();
        let sb = log_mel(
            &stft_magnitude(&Waveform::new(loud, SAMPLE_RATE).unwrap(), WIN_LEN, HOP).unwrap(),
            &fb,
        )
        .unwrap();
        let ln4 = 4.0f32.ln();
        let mut checked = 0;
        for (a, b) in sa.tensor().data().iter().zip(sb.tensor().data()) {
            // Only where energy dominates the floor (E >= ~50x the offset).
            if *a > LOG_FLOOR.ln() + 4.0 {
                assert!((b - a - ln4).abs() < 0.05, "{a} -> {b}");
                checked += 1;
            }
        }
        assert!(checked > 100, "too few energetic cells ({checked})");
    }

    #[test]
    fn single_tone_activates_only_covering_bands() {
        let fb = MelFilterbank::standard().unwrap();
        let freq = 1000.0f32;
        let n = SAMPLE_RATE as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| 0.9 * (std::f32::consts::TAU * freq * i as f32 / n as f32 * 1.0).sin())
            .collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let spec = log_mel(&stft_magnitude(&w, WIN_LEN, HOP).unwrap(), &fb).unwrap();
        let covering = fb.bands_covering(freq, WIN_LEN, SAMPLE_RATE);
        assert!(!covering.is_empty());
        let silence = LOG_FLOOR.ln();
        // Mean activation per band over time.
        let mut active = Vec::new();
        for m in 0..fb.n_mels {
            let mean: f32 = (0..SPEC_FRAMES)
                .map(|f| spec.tensor().at(&[f, m]))
                .sum::<f32>()
                / SPEC_FRAMES as f32;
            if mean > silence + 1.0 {
                active.push(m);
            }
        }
        for m in &active {
            assert!(
                covering.contains(m),
                "band {m} active but does not cover {freq} Hz (covering: {covering:?})"
            );
        }
        assert!(!active.is_empty());
    }

    use crate::audio::{SAMPLE_RATE, WIN_LEN};
}
