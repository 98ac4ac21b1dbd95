//! Evaluation metrics: CC, NSS, AUC-Judd, SIM.
//!
//! All reductions run in f64 with a fixed sequential order. Constant-map
//! degeneracies report a value of 0 with a structured warning instead of
//! failing, so batch evaluation always completes.

use crate::error::{Error, Result};
use crate::losses;
use crate::saliency::{DenseMap, FixationMap};
use crate::tensor::Tensor;

/// A metric value plus an optional degeneracy warning.
#[derive(Debug, Clone)]
pub struct Scored {
    pub value: f64,
    pub warning: Option<String>,
}

impl Scored {
    fn ok(value: f64) -> Scored {
        Scored { value, warning: None }
    }
    fn degenerate(msg: &str) -> Scored {
        Scored { value: 0.0, warning: Some(msg.to_string()) }
    }
}

fn mean_f64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

fn population_var(x: &[f32], mean: f64) -> f64 {
    x.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / x.len() as f64
}

/// Pearson linear correlation between the prediction and the dense ground
/// truth; 0 with a warning when either map is constant.
pub fn metric_cc(pred: &Tensor, den: &DenseMap) -> Scored {
    let q = den.tensor();
    if pred.shape() != q.shape() {
        return Scored::degenerate("shape mismatch between prediction and ground truth");
    }
    let mp = mean_f64(pred.data());
    let mq = mean_f64(q.data());
    let vp = population_var(pred.data(), mp);
    let vq = population_var(q.data(), mq);
    if vp < 1e-16 || vq < 1e-16 {
        return Scored::degenerate("correlation undefined on a constant map");
    }
    let mut cov = 0.0f64;
    for (&a, &b) in pred.data().iter().zip(q.data()) {
        cov += (a as f64 - mp) * (b as f64 - mq);
    }
    cov /= pred.len() as f64;
    Scored::ok(cov / (vp.sqrt() * vq.sqrt()))
}

/// Normalized scanpath saliency: z-score the prediction over all pixels,
/// average at fixation locations. 0 with a warning for constant maps.
pub fn metric_nss(pred: &Tensor, fix: &FixationMap) -> Scored {
    if pred.shape() != [fix.height, fix.width] {
        return Scored::degenerate("shape mismatch between prediction and fixations");
    }
    if fix.count() == 0 {
        return Scored::degenerate("no fixations to score");
    }
    let m = mean_f64(pred.data());
    let var = population_var(pred.data(), m);
    if var < 1e-16 {
        return Scored::degenerate("NSS undefined on a constant map");
    }
    let std = var.sqrt();
    let mut acc = 0.0f64;
    for (r, c) in fix.iter_fixations() {
        acc += (pred.at(&[r, c]) as f64 - m) / std;
    }
    Scored::ok(acc / fix.count() as f64)
}

/// Area under the ROC curve with thresholds at the saliency values of the
/// fixated pixels (deduplicated, descending), trapezoid rule with the (0,0)
/// and (1,1) endpoints. Errors when the grid has no fixated or no
/// non-fixated pixel.
pub fn metric_auc_judd(pred: &Tensor, fix: &FixationMap) -> Result<f64> {
    if pred.shape() != [fix.height, fix.width] {
        return Err(Error::dim(format!(
            "prediction {:?} does not match fixation grid {} x {}",
            pred.shape(),
            fix.height,
            fix.width
        )));
    }
    let n_fix = fix.count();
    let n_all = pred.len();
    if n_fix == 0 || n_fix == n_all {
        return Err(Error::Input(format!(
            "AUC needs both fixated and non-fixated pixels (got {n_fix} of {n_all})"
        )));
    }
    let mut fix_vals: Vec<f64> = fix
        .iter_fixations()
        .map(|(r, c)| pred.at(&[r, c]) as f64)
        .collect();
    fix_vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    fix_vals.dedup();
    auc_from_thresholds(pred, fix, &fix_vals)
}

/// Trapezoid ROC area for an explicit descending threshold list. Shared by
/// the metric and by the exhaustive-threshold test oracle.
pub fn auc_from_thresholds(pred: &Tensor, fix: &FixationMap, thresholds: &[f64]) -> Result<f64> {
    let n_fix = fix.count() as f64;
    let n_non = (pred.len() - fix.count()) as f64;
    let mut pts = vec![(0.0f64, 0.0f64)];
    for &thr in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (i, &v) in pred.data().iter().enumerate() {
            let is_fix = fix.cells[i] == 1;
            if (v as f64) >= thr {
                if is_fix {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        pts.push((fp as f64 / n_non, tp as f64 / n_fix));
    }
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut area = 0.0f64;
    for pair in pts.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

/// Histogram intersection of the sum-normalized maps. Shares the loss
/// implementation so the metric and the training term agree bit-for-bit.
pub fn metric_sim(pred: &Tensor, den: &DenseMap) -> Result<f64> {
    Ok(losses::loss_sim(pred, den)?.item() as f64)
}

/// One evaluation row for a single map.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub cc: f64,
    pub nss: f64,
    pub auc_judd: f64,
    pub sim: f64,
    pub warnings: Vec<String>,
}

/// Score a prediction against a clip's fixations and dense ground truth.
pub fn evaluate_map(pred: &Tensor, fix: &FixationMap, den: &DenseMap) -> Result<MetricsRow> {
    let cc = metric_cc(pred, den);
    let nss = metric_nss(pred, fix);
    // A constant prediction has every threshold equal: chance level by the
    // tie convention rather than an error.
    let auc = match metric_auc_judd(pred, fix) {
        Ok(v) => v,
        Err(Error::Input(msg)) => return Err(Error::Input(msg)),
        Err(e) => return Err(e),
    };
    let sim = metric_sim(pred, den)?;
    let mut warnings = Vec::new();
    if let Some(w) = cc.warning.clone() {
        warnings.push(w);
    }
    if let Some(w) = nss.warning.clone() {
        warnings.push(w);
    }
    Ok(MetricsRow { cc: cc.value, nss: nss.value, auc_judd: auc, sim, warnings })
}
