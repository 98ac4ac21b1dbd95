//! Operational entry points shared by the CLI and the runnable examples:
//! dataset generation, training, evaluation, standalone map scoring, the
//! attention benchmark, and the predictive-coding iteration sweep.
//!
//! Outputs land in the conventional layout `out/{data,ckpt,reports}`.

use crate::bench;
use crate::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::Rng;
use crate::saliency::{fixation_to_dense, write_pgm, DenseMap, FixationMap};
use crate::synth::{self, Dataset};
use crate::tensor::io as tio;
use crate::train::{self, loss_log_csv, Checkpoint};
use std::path::{Path, PathBuf};

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

/// Generate and persist the synthetic dataset; returns its directory.
pub fn run_gen_data(cfg: &HarnessConfig, out: &Path) -> Result<PathBuf> {
    let ds = synth::generate(&cfg.synth)?;
    let dir = data_dir(out);
    synth::save(&ds, &dir)?;
    Ok(dir)
}

/// Train on a stored dataset (generating it first when absent); writes the
/// checkpoint and the per-step loss log.
pub fn run_train(cfg: &HarnessConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let dir = data_dir(out);
    let ds: Dataset = if dir.join("manifest.json").exists() {
        synth::load(&dir)?
    } else {
        let ds = synth::generate(&cfg.synth)?;
        synth::save(&ds, &dir)?;
        ds
    };
    let resume_ck = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let outcome = train::train(&cfg.model, &cfg.train, &ds, resume_ck.as_ref())?;
    let ckpt = ckpt_dir(out);
    outcome.checkpoint.save(&ckpt)?;
    let reports = reports_dir(out);
    std::fs::create_dir_all(&reports)?;
    std::fs::write(reports.join("train_loss.csv"), loss_log_csv(&outcome.log))?;
    Ok(ckpt)
}

/// Evaluate a checkpoint over a stored dataset; writes the metric CSV and
/// per-clip map dumps (CSPT + PGM), returns the CSV text.
pub fn run_eval(out: &Path, ckpt: &Path, data: &Path) -> Result<String> {
    let ck = Checkpoint::load(ckpt)?;
    let net = ck.restore_model()?;
    let ds = synth::load(data)?;
    let report = train::evaluate(&net, &ds, None)?;
    let reports = reports_dir(out);
    let maps = reports.join("maps");
    std::fs::create_dir_all(&maps)?;
    for clip in &ds.clips {
        let pred = net.forward(
            &clip.video,
            if net.cfg.audio_enabled { Some(&clip.spectrogram) } else { None },
        )?;
        let stem = format!("clip_{:04}", clip.meta.index);
        tio::save(&maps.join(format!("{stem}.cspt")), &pred)?;
        write_pgm(&pred, &maps.join(format!("{stem}.pgm")))?;
    }
    let csv = report.to_csv();
    std::fs::write(reports.join("metrics.csv"), &csv)?;
    Ok(csv)
}

/// Score one prediction file against fixation (and optionally dense) maps.
/// Without a dense map the fixations are densified with the default blur.
pub fn run_metrics(pred: &Path, fix: &Path, den: Option<&Path>) -> Result<String> {
    let pred_t = tio::load(pred)?;
    let fix_m = FixationMap::from_tensor(&tio::load(fix)?)?;
    let den_m = match den {
        Some(p) => DenseMap::from_tensor(&tio::load(p)?)?,
        None => fixation_to_dense(&fix_m, fix_m.width as f64 / 32.0)?,
    };
    let row = metrics::evaluate_map(&pred_t, &fix_m, &den_m)?;
    let mut csv = String::from("dataset,CC,NSS,AUC-J,SIM\n");
    csv.push_str(&format!(
        "{},{:.6},{:.6},{:.6},{:.6}\n",
        pred.file_stem().and_then(|s| s.to_str()).unwrap_or("map"),
        row.cc,
        row.nss,
        row.auc_judd,
        row.sim
    ));
    for w in &row.warnings {
        csv.push_str(&format!("# warning: {w}\n"));
    }
    Ok(csv)
}

/// Attention complexity benchmark; writes and returns the CSV plus a
/// slope summary line per mode.
pub fn run_bench_attention(
    lengths: &[usize],
    channels: usize,
    seed: u64,
    out: &Path,
) -> Result<String> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Input("benchmark needs token counts >= 1".into()));
    }
    let rows = bench::bench_attention(lengths, channels, seed);
    let mut csv = bench::bench_csv(&rows);
    for (mode, slope) in bench::madds_slopes(&rows) {
        csv.push_str(&format!("# slope,{mode},{slope:.4}\n"));
    }
    for &l in lengths {
        let err = bench::parity_max_rel_error(l, channels, seed);
        csv.push_str(&format!("# parity,{l},{err:.3e}\n"));
    }
    let reports = reports_dir(out);
    std::fs::create_dir_all(&reports)?;
    std::fs::write(reports.join("attention_bench.csv"), &csv)?;
    Ok(csv)
}

/// Per-iteration prediction-error traces over freshly generated clips, for
/// each step size: the iteration-sweep analysis.
pub fn run_cpc_sweep(
    cfg: &HarnessConfig,
    alphas: &[f32],
    max_iters: usize,
    clips: usize,
    out: &Path,
) -> Result<String> {
    if !cfg.model.audio_enabled || !cfg.model.cpc.enabled {
        return Err(Error::Config(
            "the iteration sweep needs the audio branch and predictive coding enabled".into(),
        ));
    }
    let synth_cfg = synth::SynthConfig { clips, ..cfg.synth.clone() };
    let ds = synth::generate(&synth_cfg)?;
    let mut csv = String::from("alpha,clip,iteration,eps_total,eps_per_layer\n");
    for &alpha in alphas {
        let mut mcfg = cfg.model.clone();
        mcfg.cpc.alpha = alpha;
        mcfg.cpc.iterations = max_iters as i64;
        let mut rng = Rng::new(cfg.train.seed).fork(0xC9C);
        let net = mcfg.build(&mut rng)?;
        for clip in &ds.clips {
            let trace = net
                .cpc_trace(&clip.video, &clip.spectrogram)?
                .ok_or_else(|| Error::Internal("sweep model lost its hierarchy".into()))?;
            for (it, eps) in trace.iter().enumerate() {
                let total: f32 = eps.iter().sum();
                let layers = eps
                    .iter()
                    .map(|e| format!("{e:.6e}"))
                    .collect::<Vec<_>>()
                    .join(";");
                csv.push_str(&format!(
                    "{alpha},{},{it},{total:.6e},{layers}\n",
                    clip.meta.index
                ));
            }
        }
    }
    let reports = reports_dir(out);
    std::fs::create_dir_all(&reports)?;
    std::fs::write(reports.join("cpc_sweep.csv"), &csv)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> HarnessConfig {
        let mut cfg = HarnessConfig::desk();
        cfg.model.frames = 4;
        cfg.model.height = 32;
        cfg.model.width = 32;
        cfg.model.channels = 6;
        cfg.model.encoder_channels = [4, 4, 6, 6];
        cfg.model.norm_groups = 2;
        cfg.model.aspp_rates = vec![1, 2];
        cfg.model.audio_dim = 8;
        cfg.model.decoder_widths = [6; 4];
        cfg.model.dense_layers = 1;
        cfg.model.dense_growth = 4;
        cfg.model.cpc.layers = 2;
        cfg.model.cpc.iterations = 1;
        cfg.synth.clips = 3;
        cfg.synth.frames = 4;
        cfg.synth.fps = 4.0;
        cfg.synth.height = 32;
        cfg.synth.width = 32;
        cfg.train.steps = 2;
        cfg.train.batch_size = 1;
        cfg
    }

    #[test]
    fn gen_data_twice_is_byte_identical() {
        let cfg = small_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_gen_data(&cfg, a.path()).unwrap();
        run_gen_data(&cfg, b.path()).unwrap();
        // Compare every file byte for byte.
        let mut paths: Vec<PathBuf> = walk(&data_dir(a.path()));
        paths.sort();
        assert!(!paths.is_empty());
        for pa in paths {
            let rel = pa.strip_prefix(a.path()).unwrap();
            let pb = b.path().join(rel);
            let ba = std::fs::read(&pa).unwrap();
            let bb = std::fs::read(&pb).unwrap();
            assert_eq!(ba, bb, "{} differs", rel.display());
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn train_eval_and_metrics_flow() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        run_gen_data(&cfg, out).unwrap();
        let ckpt = run_train(&cfg, out, None).unwrap();
        assert!(reports_dir(out).join("train_loss.csv").exists());
        let csv = run_eval(out, &ckpt, &data_dir(out)).unwrap();
        assert!(csv.starts_with("dataset,CC,NSS,AUC-J,SIM\n"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        assert!(reports_dir(out).join("maps").join("clip_0000.pgm").exists());

        // Standalone scoring of a ground-truth map against itself.
        let clip0 = data_dir(out).join("clip_0000");
        let row = run_metrics(
            &clip0.join("dense.cspt"),
            &clip0.join("fixation.cspt"),
            Some(&clip0.join("dense.cspt")),
        )
        .unwrap();
        let line = row.lines().nth(1).unwrap();
        let cc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((cc - 1.0).abs() < 1e-6, "{line}");
    }

    #[test]
    fn cpc_sweep_is_monotone_at_small_alpha() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let csv = run_cpc_sweep(&cfg, &[0.01], 6, 2, dir.path()).unwrap();
        // Per clip, eps_total must not increase along iterations.
        let mut last: Option<(usize, f64)> = None;
        for line in csv.lines().skip(1) {
            let mut cols = line.split(',');
            let _alpha = cols.next().unwrap();
            let clip: usize = cols.next().unwrap().parse().unwrap();
            let _it: usize = cols.next().unwrap().parse().unwrap();
            let total: f64 = cols.next().unwrap().parse().unwrap();
            if let Some((pc, pt)) = last {
                if pc == clip {
                    assert!(total <= pt + 1e-9, "clip {clip}: {pt} -> {total}");
                }
            }
            last = Some((clip, total));
        }
    }
}
