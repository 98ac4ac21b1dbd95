//! Differentiable training objectives over predicted and ground-truth maps.
//!
//! The total objective combines a KL term against the densified ground
//! truth with weighted correlation and similarity terms. With the default
//! weights of -0.1 the consistent sign convention applies the weights to
//! the raw (positive) correlation and similarity, so minimizing the total
//! minimizes KL while maximizing both agreement terms. The
//! `paper_literal_signs` flag instead composes the published formulas
//! verbatim, where the correlation loss is already negated before the
//! negative weight is applied.

use crate::error::{Error, Result};
use crate::metrics;
use crate::saliency::{DenseMap, FixationMap};
use crate::tensor::Tensor;

/// Floor applied to predictions before logs and divisions.
pub const PRED_FLOOR: f32 = 1e-8;
/// Variance below this is treated as a degenerate constant map.
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_cc: f32,
    pub lambda_sim: f32,
    /// Compose the published loss formulas verbatim (double-negated
    /// correlation) instead of the consistent convention.
    pub paper_literal_signs: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cc: -0.1, lambda_sim: -0.1, paper_literal_signs: false }
    }
}

/// Scalar values of the loss components at the current step, for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub total: f32,
    pub kl: f32,
    pub cc: f32,
    pub sim: f32,
    pub nss: f32,
}

fn check_same_2d(pred: &Tensor, den: &Tensor) -> Result<()> {
    if pred.rank() != 2 || pred.shape() != den.shape() {
        return Err(Error::dim(format!(
            "loss inputs must be matching 2-D maps, got {:?} vs {:?}",
            pred.shape(),
            den.shape()
        )));
    }
    Ok(())
}

/// Floor and sum-normalize a prediction in-graph.
fn normalize_pred(pred: &Tensor) -> Result<Tensor> {
    let raw_sum: f64 = pred.data().iter().map(|&v| v as f64).sum();
    if raw_sum <= 0.0 {
        return Err(Error::Input("prediction sums to zero; cannot normalize".into()));
    }
    let floored = pred.clamp_min(PRED_FLOOR);
    let total = floored.sum_all().reshape(&[1, 1])?.expand(pred.shape())?;
    floored.div(&total)
}

/// KL divergence of the prediction from the densified target:
/// sum_x den(x) ln(den(x) / pred(x)) after flooring and normalization.
pub fn loss_kl(pred: &Tensor, den: &DenseMap) -> Result<Tensor> {
    check_same_2d(pred, den.tensor())?;
    let p = normalize_pred(pred)?;
    let q = den.tensor();
    // Constant entropy term sum q ln q (zero cells contribute zero).
    let mut q_entropy = 0.0f64;
    for &qv in q.data() {
        if qv > 0.0 {
            q_entropy += qv as f64 * (qv as f64).ln();
        }
    }
    let cross = q.mul(&p.ln())?.sum_all();
    Ok(Tensor::scalar(q_entropy as f32).sub(&cross)?.reshape(&[1])?)
}

/// Pearson correlation between the maps, as a graph scalar.
pub fn pearson(pred: &Tensor, den: &Tensor) -> Result<Tensor> {
    check_same_2d(pred, den)?;
    let mp = pred.mean_all().item() as f64;
    let mq = den.mean_all().item() as f64;
    let var = |t: &Tensor, m: f64| -> f64 {
        t.data().iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / t.len() as f64
    };
    if var(pred, mp) < VAR_FLOOR || var(den, mq) < VAR_FLOOR {
        return Err(Error::Degenerate(
            "correlation undefined on a zero-variance map".into(),
        ));
    }
    let n = pred.len();
    let center = |t: &Tensor| -> Result<Tensor> {
        let m = t.mean_all().reshape(&[1, 1])?.expand(t.shape())?;
        t.sub(&m)
    };
    let cp = center(pred)?;
    let cq = center(den)?;
    let cov = cp.mul(&cq)?.sum_all().scale(1.0 / n as f32);
    let sp = cp.mul(&cp)?.sum_all().scale(1.0 / n as f32).sqrt();
    let sq = cq.mul(&cq)?.sum_all().scale(1.0 / n as f32).sqrt();
    cov.div(&sp.mul(&sq)?)
}

/// Correlation loss: the negated Pearson correlation, in [-1, 1].
pub fn loss_cc(pred: &Tensor, den: &DenseMap) -> Result<Tensor> {
    Ok(pearson(pred, den.tensor())?.neg())
}

/// Histogram intersection of the sum-normalized maps, in [0, 1].
pub fn loss_sim(pred: &Tensor, den: &DenseMap) -> Result<Tensor> {
    check_same_2d(pred, den.tensor())?;
    let p = normalize_pred(pred)?;
    p.minimum(den.tensor())?.sum_all().reshape(&[1])
}

/// Weighted total objective. Under the default (consistent) convention:
/// KL + lambda_cc * correlation + lambda_sim * similarity; the literal
/// convention replaces the correlation by its negation first.
pub fn loss_total(
    pred: &Tensor,
    fix: &FixationMap,
    den: &DenseMap,
    w: &LossWeights,
) -> Result<(Tensor, LossComponents)> {
    let kl = loss_kl(pred, den)?;
    let cc = pearson(pred, den.tensor())?;
    let sim = loss_sim(pred, den)?;
    let cc_term = if w.paper_literal_signs { cc.neg() } else { cc.clone() };
    let total = kl
        .add(&cc_term.scale(w.lambda_cc).reshape(&[1])?)?
        .add(&sim.scale(w.lambda_sim))?;
    let nss = metrics::metric_nss(pred, fix).value;
    let components = LossComponents {
        total: total.item(),
        kl: kl.item(),
        cc: cc.item(),
        sim: sim.item(),
        nss: nss as f32,
    };
    Ok((total, components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::saliency::fixation_to_dense;
    use crate::tensor::backward;

    fn dense(shape: &[usize], data: Vec<f32>) -> DenseMap {
        DenseMap::from_tensor(&Tensor::from_vec(shape, data).unwrap()).unwrap()
    }

    fn rand_map(rng: &mut Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.range_f32(0.01, 1.0)).collect()).unwrap()
    }

    #[test]
    fn kl_of_identical_maps_is_zero() {
        let mut rng = Rng::new(1);
        let m = rand_map(&mut rng, 6, 6);
        let d = DenseMap::from_tensor(&m).unwrap();
        // Prediction equal to the normalized target.
        let kl = loss_kl(d.tensor(), &d).unwrap();
        assert!(kl.item().abs() < 1e-6, "kl {}", kl.item());
    }

    #[test]
    fn kl_two_cell_closed_form() {
        let pred = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        let den = dense(&[1, 2], vec![1.0, 0.0]);
        let kl = loss_kl(&pred, &den).unwrap();
        assert!((kl.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let p = rand_map(&mut rng, 4, 5);
            let q = dense(&[4, 5], (0..20).map(|_| rng.range_f32(0.01, 1.0)).collect());
            let kl = loss_kl(&p, &q).unwrap();
            assert!(kl.item() >= -1e-6, "kl {}", kl.item());
        }
    }

    #[test]
    fn kl_all_zero_prediction_is_input_error() {
        let pred = Tensor::zeros(&[3, 3]);
        let den = dense(&[3, 3], vec![1.0; 9]);
        assert!(matches!(loss_kl(&pred, &den), Err(Error::Input(_))));
    }

    #[test]
    fn cc_loss_examples() {
        let mut rng = Rng::new(3);
        let s = rand_map(&mut rng, 5, 5);
        let d = DenseMap::from_tensor(&s).unwrap();
        // Perfect correlation, negated.
        assert!((loss_cc(&s, &d).unwrap().item() + 1.0).abs() < 1e-5);
        // Positive affine transform keeps correlation 1.
        let scaled = s.scale(3.0).add_scalar(0.7);
        assert!((loss_cc(&scaled, &d).unwrap().item() + 1.0).abs() < 1e-5);
        // Hand 2x2 case: anti-correlated maps give loss +1.
        let pred = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let den = dense(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        assert!((loss_cc(&pred, &den).unwrap().item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cc_zero_variance_is_degenerate_error() {
        let pred = Tensor::full(&[3, 3], 0.5);
        let den = dense(&[3, 3], (1..=9).map(|v| v as f32).collect());
        assert!(matches!(loss_cc(&pred, &den), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sim_examples() {
        let mut rng = Rng::new(4);
        let s = rand_map(&mut rng, 4, 4);
        let d = DenseMap::from_tensor(&s).unwrap();
        assert!((loss_sim(&s, &d).unwrap().item() - 1.0).abs() < 1e-5);

        let p = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let q = dense(&[1, 4], vec![0.0, 0.0, 1.0, 1.0]);
        // Disjoint support: only the floor leaks through.
        assert!(loss_sim(&p, &q).unwrap().item() < 1e-6);

        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        let q = dense(&[1, 2], vec![1.0, 0.0]);
        assert!((loss_sim(&p, &q).unwrap().item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn total_loss_perfect_prediction_and_zero_weights() {
        let fix = crate::saliency::FixationMap::from_points(8, 8, &[(2, 2), (5, 6)]);
        let den = fixation_to_dense(&fix, 1.0).unwrap();
        let pred = den.tensor().clone();
        let w = LossWeights::default();
        let (total, parts) = loss_total(&pred, &fix, &den, &w).unwrap();
        assert!((total.item() + 0.2).abs() < 1e-6, "total {}", total.item());
        assert!(parts.kl.abs() < 1e-6);
        assert!((parts.cc - 1.0).abs() < 1e-5);
        assert!((parts.sim - 1.0).abs() < 1e-5);

        let w0 = LossWeights { lambda_cc: 0.0, lambda_sim: 0.0, paper_literal_signs: false };
        let (total0, parts0) = loss_total(&pred, &fix, &den, &w0).unwrap();
        assert!((total0.item() - parts0.kl).abs() < 1e-7);
    }

    #[test]
    fn literal_signs_flip_the_cc_term() {
        let mut rng = Rng::new(5);
        let fix = crate::saliency::FixationMap::from_points(6, 6, &[(1, 1)]);
        let den = fixation_to_dense(&fix, 1.0).unwrap();
        let pred = rand_map(&mut rng, 6, 6);
        let wc = LossWeights::default();
        let wl = LossWeights { paper_literal_signs: true, ..Default::default() };
        let (tc, parts) = loss_total(&pred, &fix, &den, &wc).unwrap();
        let (tl, _) = loss_total(&pred, &fix, &den, &wl).unwrap();
        let delta = tl.item() - tc.item();
        // Literal mode adds +0.1 cc twice relative to consistent mode.
        assert!((delta - 2.0 * 0.1 * parts.cc).abs() < 1e-5);
    }

    #[test]
    fn total_loss_is_differentiable() {
        let mut rng = Rng::new(6);
        let fix = crate::saliency::FixationMap::from_points(6, 6, &[(2, 3), (4, 1)]);
        let den = fixation_to_dense(&fix, 1.0).unwrap();
        let pred = rand_map(&mut rng, 6, 6).tracked_leaf();
        let (total, _) = loss_total(&pred, &fix, &den, &LossWeights::default()).unwrap();
        backward(&total).unwrap();
        let g = pred.grad_vec().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
