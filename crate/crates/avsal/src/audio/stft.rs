//! Short-time Fourier transform magnitudes.

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Periodic Hann window of length `n`.
fn hann_periodic(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f32::consts::TAU * i as f32 / n as f32).cos())
        .collect()
}

/// Magnitude spectrogram: periodic Hann window, one-sided DFT of each frame.
/// Result is (frames, win_len/2 + 1) with
/// `frames = 1 + floor((len - win_len) / hop)`.
pub fn stft_magnitude(w: &Waveform, win_len: usize, hop: usize) -> Result<Tensor> {
    if hop == 0 {
        return Err(Error::Input("stft hop must be >= 1".into()));
    }
    if win_len == 0 || win_len > w.samples.len() {
        return Err(Error::Input(format!(
            "stft window of {win_len} samples does not fit signal of {}",
            w.samples.len()
        )));
    }
    let frames = 1 + (w.samples.len() - win_len) / hop;
    let bins = win_len / 2 + 1;
    let window = hann_periodic(win_len);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(win_len);

    let mut out = vec![0.0f32; frames * bins];
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); win_len];
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[f * bins + k] = buf[k].norm();
        }
    }
    Tensor::from_vec(&[frames, bins], out)
}
