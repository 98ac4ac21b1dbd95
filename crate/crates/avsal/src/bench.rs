//! Instrumented attention cores for the complexity benchmark.
//!
//! The benchmark measures the similarity computation itself -- from the
//! projected Q, K, V token matrices to the mixed output -- which is where
//! the quadratic and linear formulations differ; the four 1x1x1
//! projections around it are identical in both modes and excluded. Every
//! buffer allocation inside a core is routed through [`AllocLog`], and
//! multiply-add counters accumulate the exact executed counts of the inner
//! product loops, so the reported numbers are measurements of this run,
//! not formulas.

use crate::attention::kernel_phi_scalar;
use crate::rng::Rng;
use std::time::Instant;

/// Tracks live words, their peak, and the largest single allocation made
/// while a core runs.
#[derive(Debug, Default, Clone)]
pub struct AllocLog {
    live: usize,
    pub peak_words: usize,
    pub max_alloc_words: usize,
}

impl AllocLog {
    fn alloc(&mut self, words: usize) -> Vec<f32> {
        self.live += words;
        self.peak_words = self.peak_words.max(self.live);
        self.max_alloc_words = self.max_alloc_words.max(words);
        vec![0.0; words]
    }

    fn free(&mut self, buf: Vec<f32>) {
        self.live -= buf.len();
        drop(buf);
    }
}

/// Measured cost of one core invocation.
#[derive(Debug, Clone, Default)]
pub struct CoreCost {
    pub madds: u64,
    pub peak_words: usize,
    pub max_alloc_words: usize,
}

fn matmul_counted(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    log: &mut AllocLog,
    madds: &mut u64,
) -> Vec<f32> {
    // f64 accumulation: the cores double as numerical oracles, so their
    // dot products must not lose the parity they are checking.
    let mut out = log.alloc(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a[i * k + kk] as f64 * b[kk * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    *madds += (m * k * n) as u64;
    out
}

/// Softmax attention core: scores = Q K^T / L, row softmax, times V.
/// Materializes the L x L similarity matrix.
pub fn quadratic_core(q: &[f32], k: &[f32], v: &[f32], l: usize, c: usize) -> (Vec<f32>, CoreCost) {
    let mut log = AllocLog::default();
    let mut madds = 0u64;
    // Q (L,C) times K^T: inner loops over C per (i,j) pair.
    let mut scores = log.alloc(l * l);
    for i in 0..l {
        for j in 0..l {
            let mut acc = 0.0f64;
            for cc in 0..c {
                acc += q[i * c + cc] as f64 * k[j * c + cc] as f64;
            }
            scores[i * l + j] = (acc / l as f64) as f32;
        }
    }
    madds += (l * l * c) as u64;
    for row in scores.chunks_mut(l) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            sum += *s as f64;
        }
        for s in row.iter_mut() {
            *s = (*s as f64 / sum) as f32;
        }
    }
    let out = matmul_counted(&scores, v, l, l, c, &mut log, &mut madds);
    log.free(scores);
    let cost = CoreCost { madds, peak_words: log.peak_words, max_alloc_words: log.max_alloc_words };
    (out, cost)
}

/// Kernelized attention evaluated left-to-right: (phi(Q) phi(K)^T) V with
/// the explicit L x L kernel matrix. The parity oracle for the linear core.
pub fn kernel_quadratic_core(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    l: usize,
    c: usize,
) -> (Vec<f32>, CoreCost) {
    let mut log = AllocLog::default();
    let mut madds = 0u64;
    let mut pq = log.alloc(l * c);
    let mut pk = log.alloc(l * c);
    for i in 0..l * c {
        pq[i] = kernel_phi_scalar(q[i] as f64) as f32;
        pk[i] = kernel_phi_scalar(k[i] as f64) as f32;
    }
    let mut big = log.alloc(l * l);
    for i in 0..l {
        for j in 0..l {
            let mut acc = 0.0f64;
            for cc in 0..c {
                acc += pq[i * c + cc] as f64 * pk[j * c + cc] as f64;
            }
            big[i * l + j] = acc as f32;
        }
    }
    madds += (l * l * c) as u64;
    let out = matmul_counted(&big, v, l, l, c, &mut log, &mut madds);
    log.free(big);
    log.free(pq);
    log.free(pk);
    let cost = CoreCost { madds, peak_words: log.peak_words, max_alloc_words: log.max_alloc_words };
    (out, cost)
}

/// Linear attention core: phi(Q) (phi(K)^T V), right-to-left. The largest
/// transient is the C x C kernel summary; no L x L buffer ever exists.
pub fn linear_core(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    l: usize,
    c: usize,
    normalized: bool,
) -> (Vec<f32>, CoreCost) {
    let mut log = AllocLog::default();
    let mut madds = 0u64;
    let mut pq = log.alloc(l * c);
    let mut pk = log.alloc(l * c);
    for i in 0..l * c {
        pq[i] = kernel_phi_scalar(q[i] as f64) as f32;
        pk[i] = kernel_phi_scalar(k[i] as f64) as f32;
    }
    // summary = phi(K)^T V : (C, C), f64 accumulation over the L terms.
    let mut acc64 = vec![0.0f64; c * c];
    let mut summary = log.alloc(c * c);
    for j in 0..l {
        for a in 0..c {
            let kv = pk[j * c + a] as f64;
            for b in 0..c {
                acc64[a * c + b] += kv * v[j * c + b] as f64;
            }
        }
    }
    for (s, &a) in summary.iter_mut().zip(&acc64) {
        *s = a as f32;
    }
    drop(acc64);
    madds += (l * c * c) as u64;
    let mut out = matmul_counted(&pq, &summary, l, c, c, &mut log, &mut madds);
    if normalized {
        let mut z = log.alloc(c);
        for j in 0..l {
            for a in 0..c {
                z[a] += pk[j * c + a];
            }
        }
        for i in 0..l {
            let mut denom = 0.0f32;
            for a in 0..c {
                denom += pq[i * c + a] * z[a];
            }
            madds += c as u64;
            for b in 0..c {
                out[i * c + b] /= denom;
            }
        }
        log.free(z);
    }
    log.free(summary);
    log.free(pq);
    log.free(pk);
    let cost = CoreCost { madds, peak_words: log.peak_words, max_alloc_words: log.max_alloc_words };
    (out, cost)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub mode: &'static str,
    pub l: usize,
    pub c: usize,
    pub cost: CoreCost,
    pub wall_ns: u128,
}

fn random_tokens(rng: &mut Rng, l: usize, c: usize) -> Vec<f32> {
    (0..l * c).map(|_| rng.range_f32(-1.0, 1.0)).collect()
}

/// Run both modes over the token counts and collect measured costs.
pub fn bench_attention(l_values: &[usize], c: usize, seed: u64) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &l in l_values {
        let mut rng = Rng::new(seed).fork(l as u64);
        let q = random_tokens(&mut rng, l, c);
        let k = random_tokens(&mut rng, l, c);
        let v = random_tokens(&mut rng, l, c);

        let t0 = Instant::now();
        let (_, qc) = quadratic_core(&q, &k, &v, l, c);
        let quad_ns = t0.elapsed().as_nanos();
        rows.push(BenchRow { mode: "quadratic", l, c, cost: qc, wall_ns: quad_ns });

        let t0 = Instant::now();
        let (_, lc) = linear_core(&q, &k, &v, l, c, false);
        let lin_ns = t0.elapsed().as_nanos();
        rows.push(BenchRow { mode: "linear", l, c, cost: lc, wall_ns: lin_ns });
    }
    rows
}

/// Largest relative difference between the linear core and the explicit
/// kernel-quadratic path on shared random inputs.
pub fn parity_max_rel_error(l: usize, c: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed).fork(l as u64);
    let q = random_tokens(&mut rng, l, c);
    let k = random_tokens(&mut rng, l, c);
    let v = random_tokens(&mut rng, l, c);
    let (fast, _) = linear_core(&q, &k, &v, l, c, false);
    let (slow, _) = kernel_quadratic_core(&q, &k, &v, l, c);
    // Relative to the output scale, floored so near-zero elements born of
    // cancellation do not dominate.
    let scale = slow.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    fast.iter()
        .zip(&slow)
        .map(|(a, b)| ((a - b).abs() as f64) / (b.abs() as f64).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Fitted multiply-add slope per mode.
pub fn madds_slopes(rows: &[BenchRow]) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for mode in ["quadratic", "linear"] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.l as f64, r.cost.madds as f64))
            .collect();
        if pts.len() >= 2 {
            out.push((mode, loglog_slope(&pts)));
        }
    }
    out
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mode,L,C,madds,peak_words,max_alloc_words,wall_ns\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mode, r.l, r.c, r.cost.madds, r.cost.peak_words, r.cost.max_alloc_words, r.wall_ns
        ));
    }
    out
}
