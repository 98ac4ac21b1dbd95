//! Audio frontend: waveform handling, STFT, log-Mel features, embedding.
//!
//! The pipeline follows the VGGish input conventions: 16 kHz mono, 25 ms
//! periodic-Hann windows with a 10 ms hop, 64 mel bands spanning
//! 125-7500 Hz on the HTK mel scale, natural log with a 0.01 floor, and a
//! 96-frame feature patch per clip.

mod embed;
mod mel;
mod stft;

pub use embed::{AudioEmbedder, AUDIO_DIM};
pub use mel::{log_mel, MelFilterbank, Spectrogram};
pub use stft::stft_magnitude;

use crate::error::{Error, Result};
use std::path::Path;

/// Required input rate; the frontend does not resample.
pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms window at 16 kHz.
pub const WIN_LEN: usize = 400;
/// 10 ms hop at 16 kHz.
pub const HOP: usize = 160;
/// Time frames per standard clip feature.
pub const SPEC_FRAMES: usize = 96;
/// Mel bands per standard clip feature.
pub const N_MELS: usize = 64;
/// Stabilizing offset inside the log.
pub const LOG_FLOOR: f32 = 0.01;
pub const F_MIN: f32 = 125.0;
pub const F_MAX: f32 = 7500.0;

/// Mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Waveform> {
        if sample_rate == 0 {
            return Err(Error::Input("waveform sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::Input("waveform amplitudes must lie in [-1, 1]".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Read a PCM 16-bit mono WAV file.
    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Input(format!("cannot read wav {}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Input(format!(
                "wav {} has {} channels, expected mono",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Input(format!(
                "wav {} is not 16-bit PCM",
                path.display()
            )));
        }
        let samples: Vec<f32> = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("wav decode failed: {e}")))?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Write as PCM 16-bit mono WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)
            .map_err(|e| Error::Input(format!("cannot create wav {}: {e}", path.display())))?;
        for &v in &self.samples {
            // Symmetric 1/32768 grid: values already on the grid (every
            // decoded sample is) round-trip bit-exactly.
            let q = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer
                .write_sample(q)
                .map_err(|e| Error::Internal(format!("wav write failed: {e}")))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Internal(format!("wav finalize failed: {e}")))?;
        Ok(())
    }
}

/// Crop the window matching `clip_frames` of video at `fps`, starting at the
/// clip start: exactly `round(sample_rate * clip_frames / fps)` samples.
pub fn crop_align(w: &Waveform, clip_frames: usize, fps: f64) -> Result<Waveform> {
    crop_align_at(w, 0, clip_frames, fps)
}

/// As [`crop_align`], with the window start shifted to video frame
/// `start_frame` (sample offset `round(start_frame * sample_rate / fps)`).
pub fn crop_align_at(
    w: &Waveform,
    start_frame: usize,
    clip_frames: usize,
    fps: f64,
) -> Result<Waveform> {
    if fps <= 0.0 {
        return Err(Error::Input("fps must be positive".into()));
    }
    let sr = w.sample_rate as f64;
    let start = (start_frame as f64 * sr / fps).round() as usize;
    let n = (sr * clip_frames as f64 / fps).round() as usize;
    let available = w.samples.len();
    if start + n > available {
        return Err(Error::Input(format!(
            "waveform too short: need {:.3}s from offset {:.3}s, have {:.3}s",
            n as f64 / sr,
            start as f64 / sr,
            available as f64 / sr
        )));
    }
    Ok(Waveform {
        samples: w.samples[start..start + n].to_vec(),
        sample_rate: w.sample_rate,
    })
}

/// Full clip pipeline: align to the video clip, STFT, log-Mel, standard
/// 96 x 64 patch. Requires 16 kHz input.
pub fn clip_spectrogram(w: &Waveform, clip_frames: usize, fps: f64) -> Result<Spectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "expected {SAMPLE_RATE} Hz input, got {} Hz (resampling unsupported)",
            w.sample_rate
        )));
    }
    let cropped = crop_align(w, clip_frames, fps)?;
    let mag = stft_magnitude(&cropped, WIN_LEN, HOP)?;
    let fb = MelFilterbank::standard()?;
    log_mel(&mag, &fb)
}
