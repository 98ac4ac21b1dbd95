//! Shared test support: finite-difference gradient oracles.
//!
//! The oracle differentiates a function numerically from forward
//! evaluations only, in f64, and never touches the backward pass it is
//! checking. Ops under test expose the same arithmetic in f64 through
//! `avsal::tensor::kernels`, so truncation and rounding in the oracle stay
//! far below the 1e-3 acceptance tolerance.

#![allow(dead_code)]

use avsal::rng::Rng;
use avsal::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Random tensor with entries uniform in [lo, hi).
pub fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f32(lo, hi)).collect()).unwrap()
}

/// Random tensor whose entries avoid the band (-margin, margin); used for
/// ops with kinks at zero (relu, minimum ties).
pub fn rand_tensor_away_from_zero(rng: &mut Rng, shape: &[usize], margin: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.range_f32(margin, 1.0);
            if rng.next_f32() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Elementwise central-difference check of one op.
///
/// `f32_loss` builds the tracked graph from the given leaves and returns the
/// scalar loss; `f64_loss` evaluates the identical computation from raw f64
/// buffers. Every element of every input is perturbed by +-FD_STEP and the
/// numerical derivative compared to the autodiff gradient at relative
/// tolerance FD_TOL (denominator |fd| + 1e-8, per the gradient contract).
pub fn fd_check(
    name: &str,
    inputs: &[Tensor],
    f32_loss: impl Fn(&[Tensor]) -> Tensor,
    f64_loss: impl Fn(&[Vec<f64>]) -> f64,
) {
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::tracked_leaf).collect();
    let loss = f32_loss(&leaves);
    assert_eq!(loss.len(), 1, "{name}: loss must be scalar");
    avsal::tensor::backward(&loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    // Oracle sanity: the f64 path must reproduce the f32 forward value.
    let f64_at_base = f64_loss(&base);
    assert!(
        (f64_at_base - loss.item() as f64).abs() <= 1e-4 * (1.0 + f64_at_base.abs()),
        "{name}: f64 oracle forward {f64_at_base} diverges from f32 forward {}",
        loss.item()
    );

    for (ti, leaf) in leaves.iter().enumerate() {
        let grad = leaf
            .grad_vec()
            .unwrap_or_else(|| panic!("{name}: input {ti} received no gradient"));
        for j in 0..grad.len() {
            let mut plus = base.clone();
            plus[ti][j] += FD_STEP;
            let mut minus = base.clone();
            minus[ti][j] -= FD_STEP;
            let fd = (f64_loss(&plus) - f64_loss(&minus)) / (2.0 * FD_STEP);
            let ad = grad[j] as f64;
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            assert!(
                rel < FD_TOL,
                "{name}: input {ti} element {j}: autodiff {ad} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}

/// Weighted readout that turns any output tensor into a scalar loss in a way
/// that excites every output element. Weights are deterministic in the
/// element index so the f32 and f64 paths agree bit-for-bit on them.
pub fn readout_weights(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = ((i * 2654435761usize) % 1000) as f32 / 1000.0;
            0.25 + 1.5 * x
        })
        .collect()
}

pub fn readout_f32(y: &Tensor) -> Tensor {
    let w = Tensor::from_vec(&[y.len()], readout_weights(y.len())).unwrap();
    y.reshape(&[y.len()]).unwrap().mul(&w).unwrap().sum_all()
}

pub fn readout_f64(y: &[f64]) -> f64 {
    readout_weights(y.len())
        .iter()
        .zip(y)
        .map(|(&w, &v)| w as f64 * v)
        .sum()
}
