//! Training loop, checkpoints, and evaluation over synthetic datasets.
//!
//! A step draws `batch_size` clips from a seeded epoch shuffle, accumulates
//! per-clip gradients of the mean loss, and applies one optimizer update.
//! Everything stochastic flows from the training seed, and the checkpoint
//! captures parameters, optimizer moments, and the data-order state, so a
//! resumed run reproduces the interrupted one exactly.

use crate::error::{Error, Result};
use crate::losses::{loss_total, LossWeights};
use crate::metrics::{evaluate_map, MetricsRow};
use crate::model::{ModelConfig, SaliencyNet};
use crate::nn::Module;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::synth::Dataset;
use crate::tensor::{backward, io as tio, Tensor};
use sha2::{Digest, Sha256};
use std::path::Path;

const INIT_STREAM: u64 = 0xA11C;
const SHUFFLE_STREAM: u64 = 0x5FFE;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stable digest of the model+train configuration pair.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let blob = serde_json::to_string(&(model, train)).expect("config serializes");
    let mut h = Sha256::new();
    h.update(blob.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub total: f32,
    pub kl: f32,
    pub cc: f32,
    pub sim: f32,
    pub nss: f32,
}

pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,total,kl,cc,sim,nss\n");
    for l in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            l.step, l.total, l.kl, l.cc, l.sim, l.nss
        ));
    }
    out
}

/// Everything needed to restart or evaluate a run.
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub adam_step: u64,
    pub shuffle_state: (u64, u64),
    pub perm: Vec<usize>,
    pub cursor: usize,
    pub config_hash: String,
}

impl Checkpoint {
    /// Rebuild the model carrying this checkpoint's parameters.
    pub fn restore_model(&self) -> Result<SaliencyNet> {
        let mut rng = Rng::new(self.train_cfg.seed).fork(INIT_STREAM);
        let mut net = self.model_cfg.build(&mut rng)?;
        let mut by_name: std::collections::BTreeMap<&str, &Tensor> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        net.visit_mut("", &mut |name, p| match by_name.remove(name) {
            Some(saved) => *p = saved.tracked_leaf(),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() || !by_name.is_empty() {
            return Err(Error::Input(format!(
                "checkpoint does not match the model: missing {missing:?}, extra {:?}",
                by_name.keys().collect::<Vec<_>>()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("params"))?;
        std::fs::create_dir_all(dir.join("adam"))?;
        let mut names = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            names.push(name.clone());
            tio::save(&dir.join("params").join(format!("{name}.cspt")), t)?;
            let m = Tensor::from_vec(&[self.adam_m[i].len()], self.adam_m[i].clone())?;
            let v = Tensor::from_vec(&[self.adam_v[i].len()], self.adam_v[i].clone())?;
            tio::save(&dir.join("adam").join(format!("m.{name}.cspt")), &m)?;
            tio::save(&dir.join("adam").join(format!("v.{name}.cspt")), &v)?;
        }
        let manifest = serde_json::json!({
            "model": self.model_cfg,
            "train": self.train_cfg,
            "step": self.step,
            "adam_step": self.adam_step,
            "rng": { "seed": self.shuffle_state.0, "counter": self.shuffle_state.1 },
            "perm": self.perm,
            "cursor": self.cursor,
            "config_hash": self.config_hash,
            "param_names": names,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
                Error::Input(format!("cannot read checkpoint manifest in {}: {e}", dir.display()))
            })?,
        )?;
        let model_cfg: ModelConfig = serde_json::from_value(manifest["model"].clone())?;
        let train_cfg: TrainConfig = serde_json::from_value(manifest["train"].clone())?;
        let names: Vec<String> = serde_json::from_value(manifest["param_names"].clone())?;
        let mut params = Vec::with_capacity(names.len());
        let mut adam_m = Vec::with_capacity(names.len());
        let mut adam_v = Vec::with_capacity(names.len());
        for name in &names {
            let t = tio::load(&dir.join("params").join(format!("{name}.cspt")))?;
            adam_m.push(tio::load(&dir.join("adam").join(format!("m.{name}.cspt")))?.data().to_vec());
            adam_v.push(tio::load(&dir.join("adam").join(format!("v.{name}.cspt")))?.data().to_vec());
            params.push((name.clone(), t));
        }
        Ok(Checkpoint {
            model_cfg,
            train_cfg,
            step: manifest["step"].as_u64().unwrap_or(0) as usize,
            params,
            adam_m,
            adam_v,
            adam_step: manifest["adam_step"].as_u64().unwrap_or(0),
            shuffle_state: (
                manifest["rng"]["seed"].as_u64().unwrap_or(0),
                manifest["rng"]["counter"].as_u64().unwrap_or(0),
            ),
            perm: serde_json::from_value(manifest["perm"].clone())?,
            cursor: manifest["cursor"].as_u64().unwrap_or(0) as usize,
            config_hash: manifest["config_hash"].as_str().unwrap_or_default().to_string(),
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

fn check_geometry(model_cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let c = &data.cfg;
    if model_cfg.frames != c.frames || model_cfg.height != c.height || model_cfg.width != c.width {
        return Err(Error::dim(format!(
            "model geometry {}x{}x{} does not match dataset {}x{}x{}",
            model_cfg.frames, model_cfg.height, model_cfg.width, c.frames, c.height, c.width
        )));
    }
    Ok(())
}

/// Run (or continue) a training job. With `resume` the model, optimizer
/// moments, and data order pick up exactly where the checkpoint stopped;
/// the loss trajectory is identical to the uninterrupted run.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_geometry(model_cfg, data)?;
    if data.clips.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }

    let mut net;
    let mut shuffle;
    let mut perm: Vec<usize>;
    let mut cursor;
    let start_step;
    let hash = config_hash(model_cfg, train_cfg);

    // Parameter order and sizes come from the module traversal.
    let mut sizes = Vec::new();
    let mut adam;
    match resume {
        Some(ck) => {
            if ck.config_hash != hash {
                return Err(Error::Input(
                    "checkpoint was produced under a different configuration".into(),
                ));
            }
            net = ck.restore_model()?;
            net.visit("", &mut |_, t| sizes.push(t.len()));
            let mut a = Adam::new(train_cfg.learning_rate, &sizes);
            a.m = ck.adam_m.clone();
            a.v = ck.adam_v.clone();
            a.step = ck.adam_step;
            adam = a;
            shuffle = Rng::from_state(ck.shuffle_state.0, ck.shuffle_state.1);
            perm = ck.perm.clone();
            cursor = ck.cursor;
            start_step = ck.step;
        }
        None => {
            let mut init = Rng::new(train_cfg.seed).fork(INIT_STREAM);
            net = model_cfg.build(&mut init)?;
            net.visit("", &mut |_, t| sizes.push(t.len()));
            adam = Adam::new(train_cfg.learning_rate, &sizes);
            shuffle = Rng::new(train_cfg.seed).fork(SHUFFLE_STREAM);
            perm = (0..data.clips.len()).collect();
            shuffle.shuffle(&mut perm);
            cursor = 0;
            start_step = 0;
        }
    }

    let mut log = Vec::with_capacity(train_cfg.steps.saturating_sub(start_step));
    for step in start_step..train_cfg.steps {
        net.visit("", &mut |_, t| t.clear_grad());
        let mut sums = [0.0f64; 5];
        for _ in 0..train_cfg.batch_size {
            if cursor == perm.len() {
                shuffle.shuffle(&mut perm);
                cursor = 0;
            }
            let clip = &data.clips[perm[cursor]];
            cursor += 1;

            let spect = clip.spectrogram.clone();
            let pred = net.forward(
                &clip.video,
                if model_cfg.audio_enabled { Some(&spect) } else { None },
            )?;
            let (total, parts) =
                loss_total(&pred, &clip.fixations, &clip.dense, &train_cfg.weights)?;
            if !parts.total.is_finite() {
                return Err(Error::Degenerate(format!(
                    "training diverged: loss became non-finite at step {step}"
                )));
            }
            backward(&total.scale(1.0 / train_cfg.batch_size as f32))?;
            sums[0] += parts.total as f64;
            sums[1] += parts.kl as f64;
            sums[2] += parts.cc as f64;
            sums[3] += parts.sim as f64;
            sums[4] += parts.nss as f64;
        }
        let bc = adam.begin_step();
        let mut index = 0;
        let mut opt_err: Option<Error> = None;
        net.visit_mut("", &mut |_, p| {
            if opt_err.is_none() {
                if let Err(e) = adam.update_param(index, p, bc) {
                    opt_err = Some(e);
                }
            }
            index += 1;
        });
        if let Some(e) = opt_err {
            return Err(e);
        }
        let b = train_cfg.batch_size as f64;
        log.push(StepLog {
            step,
            total: (sums[0] / b) as f32,
            kl: (sums[1] / b) as f32,
            cc: (sums[2] / b) as f32,
            sim: (sums[3] / b) as f32,
            nss: (sums[4] / b) as f32,
        });
    }

    let mut params = Vec::new();
    net.visit("", &mut |name, t| params.push((name.to_string(), t.detach())));
    let checkpoint = Checkpoint {
        model_cfg: model_cfg.clone(),
        train_cfg: train_cfg.clone(),
        step: train_cfg.steps,
        params,
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        adam_step: adam.step,
        shuffle_state: shuffle.state(),
        perm,
        cursor,
        config_hash: hash,
    };
    Ok(TrainOutcome { checkpoint, log })
}

/// Per-clip metric rows plus their arithmetic mean.
pub struct EvalReport {
    pub rows: Vec<(String, MetricsRow)>,
    pub mean: MetricsRow,
}

impl EvalReport {
    /// CSV matching the reporting layout: dataset, CC, NSS, AUC-J, SIM.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,CC,NSS,AUC-J,SIM\n");
        for (id, r) in &self.rows {
            out.push_str(&format!(
                "{id},{:.6},{:.6},{:.6},{:.6}\n",
                r.cc, r.nss, r.auc_judd, r.sim
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6}\n",
            self.mean.cc, self.mean.nss, self.mean.auc_judd, self.mean.sim
        ));
        out
    }
}

/// Evaluate a model over (a subset of) a dataset.
pub fn evaluate(net: &SaliencyNet, data: &Dataset, indices: Option<&[usize]>) -> Result<EvalReport> {
    check_geometry(&net.cfg, data)?;
    let all: Vec<usize>;
    let picks: &[usize] = match indices {
        Some(ix) => ix,
        None => {
            all = (0..data.clips.len()).collect();
            &all
        }
    };
    if picks.is_empty() {
        return Err(Error::Input("no clips selected for evaluation".into()));
    }
    let mut rows = Vec::with_capacity(picks.len());
    let mut acc = [0.0f64; 4];
    for &i in picks {
        let clip = &data.clips[i];
        let pred = net.forward(
            &clip.video,
            if net.cfg.audio_enabled { Some(&clip.spectrogram) } else { None },
        )?;
        let row = evaluate_map(&pred, &clip.fixations, &clip.dense)?;
        acc[0] += row.cc;
        acc[1] += row.nss;
        acc[2] += row.auc_judd;
        acc[3] += row.sim;
        rows.push((format!("clip_{:04}", clip.meta.index), row));
    }
    let n = picks.len() as f64;
    let mean = MetricsRow {
        cc: acc[0] / n,
        nss: acc[1] / n,
        auc_judd: acc[2] / n,
        sim: acc[3] / n,
        warnings: Vec::new(),
    };
    Ok(EvalReport { rows, mean })
}
