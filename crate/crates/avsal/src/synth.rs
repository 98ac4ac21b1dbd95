//! Deterministic synthetic audio-visual clips.
//!
//! Each clip shows 1-3 Gaussian blobs drifting over a dark background.
//! Every blob carries a signature index that fixes both its brightness and
//! a pure tone; the soundtrack plays exactly one tone. In `consistent`
//! clips the fixated (target) blob is the sounding one, so audio identifies
//! the target through the tone-brightness pairing. In `inconsistent` clips
//! the tone belongs to a signature absent from the screen and fixations
//! follow the fastest-moving blob instead. `mixed` flips a per-clip coin.
//! Everything derives from the seed through forked counter streams, so a
//! config+seed pair reproduces the dataset byte for byte.

use crate::audio::{clip_spectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::{fixation_to_dense, DenseMap, FixationMap};
use crate::tensor::{io as tio, Tensor};
use std::path::Path;

/// Distinct blob signatures (brightness/tone pairings) available.
pub const SIGNATURES: usize = 8;

/// Tone frequency of signature `k`, third-octave spaced from 300 Hz.
pub fn signature_tone_hz(k: usize) -> f64 {
    300.0 * 2f64.powf(k as f64 / 3.0)
}

/// Peak brightness of signature `k`.
pub fn signature_intensity(k: usize) -> f32 {
    0.45 + 0.5 * k as f32 / (SIGNATURES - 1) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    Consistent,
    Inconsistent,
    Mixed,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub consistency: ConsistencyMode,
    pub fixations_per_clip: usize,
    /// Densification blur in pixels; None picks width/32.
    pub dense_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 64,
            height: 64,
            width: 96,
            frames: 16,
            fps: 16.0,
            blobs_min: 1,
            blobs_max: 3,
            consistency: ConsistencyMode::Consistent,
            fixations_per_clip: 16,
            dense_sigma: None,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "synthetic resolution {} x {} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max || self.blobs_max > 3 {
            return Err(Error::Config(format!(
                "blob counts {}..{} must lie in 1..=3",
                self.blobs_min, self.blobs_max
            )));
        }
        if self.clips == 0 || self.frames == 0 || self.fps <= 0.0 {
            return Err(Error::Config("clips, frames and fps must be positive".into()));
        }
        if self.fixations_per_clip == 0 {
            return Err(Error::Config("need at least one fixation per clip".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.dense_sigma.unwrap_or(self.width as f64 / 32.0)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BlobMeta {
    pub signature: usize,
    pub intensity: f32,
    pub sigma_px: f32,
    pub speed: f32,
    pub start: (f32, f32),
    pub velocity: (f32, f32),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClipMeta {
    pub index: usize,
    pub consistent: bool,
    pub blobs: Vec<BlobMeta>,
    /// Index into `blobs` of the fixated blob.
    pub target_blob: usize,
    /// Signature of the tone on the soundtrack.
    pub sounding_signature: usize,
    pub tone_hz: f64,
    /// Mean of the target blob's per-frame centers.
    pub target_center_mean: (f32, f32),
}

/// One fully materialized clip.
pub struct ClipSample {
    pub video: Tensor,
    pub waveform: Waveform,
    pub spectrogram: Tensor,
    pub fixations: FixationMap,
    pub dense: DenseMap,
    pub meta: ClipMeta,
}

pub struct Dataset {
    pub cfg: SynthConfig,
    pub clips: Vec<ClipSample>,
}

/// Position of a bouncing blob at frame t.
fn blob_center(b: &BlobMeta, t: usize, h: usize, w: usize) -> (f32, f32) {
    let reflect = |x: f32, lo: f32, hi: f32| -> f32 {
        let span = hi - lo;
        let mut y = (x - lo).rem_euclid(2.0 * span);
        if y > span {
            y = 2.0 * span - y;
        }
        y + lo
    };
    let margin = b.sigma_px;
    (
        reflect(b.start.0 + b.velocity.0 * t as f32, margin, h as f32 - margin),
        reflect(b.start.1 + b.velocity.1 * t as f32, margin, w as f32 - margin),
    )
}

fn render_video(blobs: &[BlobMeta], cfg: &SynthConfig) -> Tensor {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut frame = vec![0.0f32; h * w];
    let mut data = vec![0.0f32; 3 * t * h * w];
    for ti in 0..t {
        for v in frame.iter_mut() {
            *v = 0.05;
        }
        for b in blobs {
            let (cr, cc) = blob_center(b, ti, h, w);
            let reach = (3.0 * b.sigma_px).ceil() as isize;
            let (r0, r1) = (
                ((cr as isize) - reach).max(0),
                ((cr as isize) + reach + 1).min(h as isize),
            );
            let (c0, c1) = (
                ((cc as isize) - reach).max(0),
                ((cc as isize) + reach + 1).min(w as isize),
            );
            for r in r0..r1 {
                for c in c0..c1 {
                    let dr = r as f32 - cr;
                    let dc = c as f32 - cc;
                    let g = (-(dr * dr + dc * dc) / (2.0 * b.sigma_px * b.sigma_px)).exp();
                    frame[(r as usize) * w + c as usize] += b.intensity * g;
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.min(1.0);
        }
        for ch in 0..3 {
            let base = (ch * t + ti) * h * w;
            data[base..base + h * w].copy_from_slice(&frame);
        }
    }
    Tensor::from_vec(&[3, t, h, w], data).expect("video shape")
}

fn synth_tone(freq: f64, secs: f64, rng: &mut Rng) -> Waveform {
    let n = (SAMPLE_RATE as f64 * secs).round() as usize;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone = 0.5 * (std::f64::consts::TAU * freq * t).sin();
            let noise = 0.01 * (rng.next_f32() as f64 * 2.0 - 1.0);
            // Snap to the 16-bit grid used on disk so that a saved-and-
            // reloaded clip reproduces this waveform bit for bit.
            let q = ((tone + noise).clamp(-1.0, 1.0) * 32768.0)
                .round()
                .clamp(-32768.0, 32767.0);
            (q / 32768.0) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).expect("tone amplitudes")
}

fn generate_clip(index: usize, cfg: &SynthConfig, rng: &mut Rng) -> Result<ClipSample> {
    let n_blobs = cfg.blobs_min + rng.below(cfg.blobs_max - cfg.blobs_min + 1);
    let mut signatures: Vec<usize> = (0..SIGNATURES).collect();
    rng.shuffle(&mut signatures);
    let chosen = &signatures[..n_blobs];

    let blobs: Vec<BlobMeta> = chosen
        .iter()
        .map(|&sig| {
            let sigma_px = rng.range_f32(4.0, 7.0);
            let speed = rng.range_f32(0.5, 2.5);
            let angle = rng.range_f32(0.0, std::f32::consts::TAU);
            let start = (
                rng.range_f32(sigma_px, cfg.height as f32 - sigma_px),
                rng.range_f32(sigma_px, cfg.width as f32 - sigma_px),
            );
            BlobMeta {
                signature: sig,
                intensity: signature_intensity(sig),
                sigma_px,
                speed,
                start,
                velocity: (speed * angle.sin(), speed * angle.cos()),
            }
        })
        .collect();

    let consistent = match cfg.consistency {
        ConsistencyMode::Consistent => true,
        ConsistencyMode::Inconsistent => false,
        ConsistencyMode::Mixed => rng.next_f32() < 0.5,
    };
    let (target_blob, sounding_signature) = if consistent {
        let t = rng.below(n_blobs);
        (t, blobs[t].signature)
    } else {
        // Fixations follow the fastest motion; the tone names an absent blob.
        let fastest = blobs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.speed.partial_cmp(&b.1.speed).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let absent: Vec<usize> = signatures[n_blobs..].to_vec();
        (fastest, absent[rng.below(absent.len())])
    };

    let video = render_video(&blobs, cfg);
    let tone_hz = signature_tone_hz(sounding_signature);
    let secs = cfg.frames as f64 / cfg.fps;
    let waveform = synth_tone(tone_hz, secs, rng);
    let spectrogram = clip_spectrogram(&waveform, cfg.frames, cfg.fps)?;

    // Fixations scatter around the target's per-frame centers.
    let tgt = &blobs[target_blob];
    let mut points = Vec::with_capacity(cfg.fixations_per_clip);
    let mut center_sum = (0.0f64, 0.0f64);
    for t in 0..cfg.frames {
        let (cr, cc) = blob_center(tgt, t, cfg.height, cfg.width);
        center_sum.0 += cr as f64;
        center_sum.1 += cc as f64;
    }
    for fi in 0..cfg.fixations_per_clip {
        // Stratified over frames: the fixation cloud covers the whole
        // trajectory, so its centroid estimates the trajectory mean.
        let t = fi % cfg.frames;
        let (cr, cc) = blob_center(tgt, t, cfg.height, cfg.width);
        let r = (cr + 1.5 * rng.normal_f32()).round().clamp(0.0, cfg.height as f32 - 1.0);
        let c = (cc + 1.5 * rng.normal_f32()).round().clamp(0.0, cfg.width as f32 - 1.0);
        points.push((r as usize, c as usize));
    }
    let fixations = FixationMap::from_points(cfg.height, cfg.width, &points);
    let dense = fixation_to_dense(&fixations, cfg.sigma())?;

    let meta = ClipMeta {
        index,
        consistent,
        target_center_mean: (
            (center_sum.0 / cfg.frames as f64) as f32,
            (center_sum.1 / cfg.frames as f64) as f32,
        ),
        blobs,
        target_blob,
        sounding_signature,
        tone_hz,
    };
    Ok(ClipSample {
        video,
        waveform,
        spectrogram: spectrogram.tensor().clone(),
        fixations,
        dense,
        meta,
    })
}

/// Generate the full dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let master = Rng::new(cfg.seed);
    let clips = (0..cfg.clips)
        .map(|i| generate_clip(i, cfg, &mut master.fork(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { cfg: cfg.clone(), clips })
}

fn clip_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join(format!("clip_{index:04}"))
}

/// Write a dataset to `root`: per-clip video/fixation/dense CSPT tensors,
/// the soundtrack as 16-bit WAV, clip metadata, and a manifest.
pub fn save(ds: &Dataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    for clip in &ds.clips {
        let dir = clip_dir(root, clip.meta.index);
        std::fs::create_dir_all(&dir)?;
        tio::save(&dir.join("video.cspt"), &clip.video)?;
        clip.waveform.write_wav(&dir.join("audio.wav"))?;
        tio::save(&dir.join("fixation.cspt"), &clip.fixations.to_tensor())?;
        tio::save(&dir.join("dense.cspt"), clip.dense.tensor())?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&clip.meta)?)?;
    }
    let manifest = serde_json::json!({
        "config": ds.cfg,
        "clips": ds.clips.len(),
    });
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load a dataset written by [`save`]; spectrograms are recomputed from the
/// stored waveforms with the standard pipeline.
pub fn load(root: &Path) -> Result<Dataset> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json")).map_err(
            |e| Error::Input(format!("cannot read dataset manifest in {}: {e}", root.display())),
        )?)?;
    let cfg: SynthConfig = serde_json::from_value(manifest["config"].clone())?;
    let count = manifest["clips"]
        .as_u64()
        .ok_or_else(|| Error::Input("manifest lacks clip count".into()))? as usize;
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        let dir = clip_dir(root, i);
        let video = tio::load(&dir.join("video.cspt"))?;
        let waveform = Waveform::read_wav(&dir.join("audio.wav"))?;
        let spectrogram = clip_spectrogram(&waveform, cfg.frames, cfg.fps)?;
        let fixations = FixationMap::from_tensor(&tio::load(&dir.join("fixation.cspt"))?)?;
        let dense = DenseMap::from_tensor(&tio::load(&dir.join("dense.cspt"))?)?;
        let meta: ClipMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        clips.push(ClipSample {
            video,
            waveform,
            spectrogram: spectrogram.tensor().clone(),
            fixations,
            dense,
            meta,
        });
    }
    Ok(Dataset { cfg, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig { clips: 4, frames: 8, fps: 8.0, ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (ca, cb) in a.clips.iter().zip(&b.clips) {
            assert_eq!(ca.video.data(), cb.video.data());
            assert_eq!(ca.waveform.samples, cb.waveform.samples);
            assert_eq!(ca.fixations.cells, cb.fixations.cells);
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.clips.len(), ds.clips.len());
        for (a, b) in ds.clips.iter().zip(&back.clips) {
            for (x, y) in a.video.data().iter().zip(b.video.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.waveform.samples, b.waveform.samples);
            for (x, y) in a.spectrogram.data().iter().zip(b.spectrogram.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "spectrogram drifted");
            }
            assert_eq!(a.meta.sounding_signature, b.meta.sounding_signature);
        }
    }

    #[test]
    fn consistent_clips_fixate_the_sounding_blob() {
        let cfg = SynthConfig {
            clips: 12,
            consistency: ConsistencyMode::Consistent,
            ..small_cfg()
        };
        let ds = generate(&cfg).unwrap();
        for clip in &ds.clips {
            assert!(clip.meta.consistent);
            let tgt = &clip.meta.blobs[clip.meta.target_blob];
            assert_eq!(tgt.signature, clip.meta.sounding_signature);
            // Fixation centroid tracks the target trajectory mean.
            let n = clip.fixations.count() as f64;
            let (mut r, mut c) = (0.0f64, 0.0f64);
            for (fr, fc) in clip.fixations.iter_fixations() {
                r += fr as f64;
                c += fc as f64;
            }
            let (mr, mc) = clip.meta.target_center_mean;
            let dr = r / n - mr as f64;
            let dc = c / n - mc as f64;
            let dist = (dr * dr + dc * dc).sqrt();
            assert!(
                dist < 2.0,
                "clip {}: centroid off by {dist:.2}px",
                clip.meta.index
            );
        }
    }

    #[test]
    fn inconsistent_clips_play_an_absent_tone() {
        let cfg = SynthConfig {
            clips: 12,
            consistency: ConsistencyMode::Inconsistent,
            ..small_cfg()
        };
        let ds = generate(&cfg).unwrap();
        for clip in &ds.clips {
            assert!(!clip.meta.consistent);
            let on_screen: Vec<usize> = clip.meta.blobs.iter().map(|b| b.signature).collect();
            assert!(
                !on_screen.contains(&clip.meta.sounding_signature),
                "sounding signature visible on screen"
            );
            // Target is the fastest blob.
            let fastest = clip
                .meta
                .blobs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.speed.partial_cmp(&b.1.speed).unwrap())
                .unwrap()
                .0;
            assert_eq!(clip.meta.target_blob, fastest);
        }
    }

    #[test]
    fn video_values_stay_in_unit_range() {
        let ds = generate(&small_cfg()).unwrap();
        for clip in &ds.clips {
            assert!(clip.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
