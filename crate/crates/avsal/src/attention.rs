//! Audio-visual interaction: cross-modal attention over flattened
//! spatio-temporal tokens, in a quadratic softmax form and a linear
//! kernelized form, plus a low-rank bilinear fusion baseline.
//!
//! Token count for a stage is L = T * h * w. The quadratic form scores
//! every token pair (O(L^2 C) work, an L x L similarity matrix); the
//! linear form rewrites the same bilinear kernel product right-to-left,
//! phi(Q) (phi(K)^T V), so the largest intermediate is C x C and work is
//! O(L C^2). Because the broadcast audio feature is constant over sites,
//! every key row is identical and the attention degenerates to a
//! per-channel gate; both forms implement the published contract verbatim
//! rather than "fixing" this, and the equivalence tests exploit it.

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Positive feature map for the linear kernel: gelu(x) + 0.2.
pub fn kernel_phi(x: &Tensor) -> Tensor {
    x.gelu().add_scalar(0.2)
}

/// Scalar version of [`kernel_phi`], used by oracles and the benchmark.
pub fn kernel_phi_scalar(x: f64) -> f64 {
    crate::tensor::kernels::gelu(x) + 0.2
}

/// Which interaction form a stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Quadratic,
    Linear,
    LinearNormalized,
    Bilinear,
}

/// Query/key/value/output projections; each is the token-space form of a
/// 1x1x1 convolution between channel width C and C.
pub struct AvimParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AvimParams {
    pub fn new(channels: usize, rng: &mut Rng) -> AvimParams {
        AvimParams {
            query: Linear::new(channels, channels, rng),
            key: Linear::new(channels, channels, rng),
            value: Linear::new(channels, channels, rng),
            output: Linear::new(channels, channels, rng),
        }
    }
}

impl Module for AvimParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Low-rank bilinear pooling projections.
pub struct BilinearParams {
    pub vis: Linear,
    pub aud: Linear,
    pub out: Linear,
}

impl BilinearParams {
    pub fn new(channels: usize, rank: usize, rng: &mut Rng) -> BilinearParams {
        BilinearParams {
            vis: Linear::new(channels, rank, rng),
            aud: Linear::new(channels, rank, rng),
            out: Linear::new(rank, channels, rng),
        }
    }
}

impl Module for BilinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.vis.visit(&join(prefix, "vis"), f);
        self.aud.visit(&join(prefix, "aud"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.vis.visit_mut(&join(prefix, "vis"), f);
        self.aud.visit_mut(&join(prefix, "aud"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Flatten (C, T, h, w) to token rows (T*h*w, C).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::dim(format!("expected stage volume, got {:?}", x.shape())));
    }
    let s = x.shape().to_vec();
    let l = s[1] * s[2] * s[3];
    x.permute(&[1, 2, 3, 0])?.reshape(&[l, s[0]])
}

/// Inverse of [`to_tokens`] for the given volume shape.
pub fn from_tokens(tokens: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let t = tokens.reshape(&[shape[1], shape[2], shape[3], shape[0]])?;
    t.permute(&[3, 0, 1, 2])
}

/// One stage of audio-visual interaction.
pub struct Avim {
    pub mode: AttentionMode,
    pub attn: Option<AvimParams>,
    pub bilinear: Option<BilinearParams>,
}

impl Avim {
    pub fn new(mode: AttentionMode, channels: usize, bilinear_rank: usize, rng: &mut Rng) -> Avim {
        match mode {
            AttentionMode::Bilinear => Avim {
                mode,
                attn: None,
                bilinear: Some(BilinearParams::new(channels, bilinear_rank, rng)),
            },
            _ => Avim { mode, attn: Some(AvimParams::new(channels, rng)), bilinear: None },
        }
    }

    /// Update the visual stage feature from the broadcast audio feature.
    /// Both inputs share the stage shape; so does the result.
    pub fn forward(&self, f_vis: &Tensor, f_aud: &Tensor) -> Result<Tensor> {
        if f_vis.shape() != f_aud.shape() {
            return Err(Error::dim(format!(
                "modality shapes differ: visual {:?} vs audio {:?}",
                f_vis.shape(),
                f_aud.shape()
            )));
        }
        match self.mode {
            AttentionMode::Quadratic => {
                attn_quadratic(f_vis, f_aud, self.attn.as_ref().expect("attention params"))
            }
            AttentionMode::Linear => {
                attn_linear(f_vis, f_aud, self.attn.as_ref().expect("attention params"), false)
            }
            AttentionMode::LinearNormalized => {
                attn_linear(f_vis, f_aud, self.attn.as_ref().expect("attention params"), true)
            }
            AttentionMode::Bilinear => {
                bilinear_fuse(f_vis, f_aud, self.bilinear.as_ref().expect("bilinear params"))
            }
        }
    }
}

impl Module for Avim {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(p) = &self.attn {
            p.visit(prefix, f);
        }
        if let Some(p) = &self.bilinear {
            p.visit(&join(prefix, "bilinear"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = &mut self.attn {
            p.visit_mut(prefix, f);
        }
        if let Some(p) = &mut self.bilinear {
            p.visit_mut(&join(prefix, "bilinear"), f);
        }
    }
}

/// Softmax attention with the explicit L x L similarity matrix, scaled by
/// 1/N with N = L (the token count), and a residual output projection.
pub fn attn_quadratic(f_vis: &Tensor, f_aud: &Tensor, p: &AvimParams) -> Result<Tensor> {
    let shape = f_vis.shape().to_vec();
    let v_tok = to_tokens(f_vis)?;
    let a_tok = to_tokens(f_aud)?;
    let l = v_tok.shape()[0];
    let q = p.query.forward(&v_tok)?;
    let k = p.key.forward(&a_tok)?;
    let v = p.value.forward(&v_tok)?;
    let scores = q.matmul(&k.permute(&[1, 0])?)?.scale(1.0 / l as f32);
    let attn = scores.softmax(1)?;
    let mixed = attn.matmul(&v)?;
    let out = p.output.forward(&mixed)?;
    from_tokens(&v_tok.add(&out)?, &shape)
}

/// Kernelized attention computed right-to-left: phi(Q) (phi(K)^T V).
/// Never materializes an L x L matrix; the transient state is C x C.
/// With `normalized`, each row is divided by phi(Q) (phi(K)^T 1).
pub fn attn_linear(
    f_vis: &Tensor,
    f_aud: &Tensor,
    p: &AvimParams,
    normalized: bool,
) -> Result<Tensor> {
    let shape = f_vis.shape().to_vec();
    let v_tok = to_tokens(f_vis)?;
    let a_tok = to_tokens(f_aud)?;
    let l = v_tok.shape()[0];
    let c = v_tok.shape()[1];
    let q = kernel_phi(&p.query.forward(&v_tok)?);
    let k = kernel_phi(&p.key.forward(&a_tok)?);
    let v = p.value.forward(&v_tok)?;
    // (C x C) kernel summary, then back out to token space.
    let summary = k.permute(&[1, 0])?.matmul(&v)?;
    let mut mixed = q.matmul(&summary)?;
    if normalized {
        // phi(K)^T 1 reduces to the column sums of phi(K).
        let z = k.sum_axes(&[0], false)?.reshape(&[c, 1])?;
        let denom = q.matmul(&z)?.expand(&[l, c])?;
        mixed = mixed.div(&denom)?;
    }
    let out = p.output.forward(&mixed)?;
    from_tokens(&v_tok.add(&out)?, &shape)
}

/// Low-rank bilinear pooling per token: out(proj_vis(v) * proj_aud(a)),
/// residual-added to the visual feature.
pub fn bilinear_fuse(f_vis: &Tensor, f_aud: &Tensor, p: &BilinearParams) -> Result<Tensor> {
    let shape = f_vis.shape().to_vec();
    let v_tok = to_tokens(f_vis)?;
    let a_tok = to_tokens(f_aud)?;
    let h = p.vis.forward(&v_tok)?.mul(&p.aud.forward(&a_tok)?)?;
    let out = p.out.forward(&h)?;
    from_tokens(&v_tok.add(&out)?, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vol(rng: &mut Rng, c: usize, t: usize, h: usize, w: usize) -> Tensor {
        let n = c * t * h * w;
        Tensor::from_vec(&[c, t, h, w], (0..n).map(|_| rng.range_f32(-1.0, 1.0)).collect())
            .unwrap()
    }

    fn zero_output_proj(p: &mut AvimParams) {
        let c = p.output.in_dim();
        p.output = Linear::zeros(c, c);
    }

    #[test]
    fn phi_values_and_positivity() {
        let x = Tensor::from_vec(&[2], vec![0.0, 10.0]).unwrap();
        let y = kernel_phi(&x);
        assert!((y.data()[0] - 0.2).abs() < 1e-7);
        assert!((y.data()[1] - 10.2).abs() < 1e-5);
        // Dense grid scan over [-10, 10].
        let mut min = f64::INFINITY;
        for i in 0..=200_000 {
            let x = -10.0 + 20.0 * i as f64 / 200_000.0;
            min = min.min(kernel_phi_scalar(x));
        }
        assert!(min > 0.02, "phi minimum {min}");
    }

    #[test]
    fn token_roundtrip() {
        let mut rng = Rng::new(1);
        let x = rand_vol(&mut rng, 3, 2, 4, 5);
        let tok = to_tokens(&x).unwrap();
        assert_eq!(tok.shape(), &[40, 3]);
        let back = from_tokens(&tok, x.shape()).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn zero_output_projection_is_identity_for_every_mode() {
        let mut rng = Rng::new(2);
        let v = rand_vol(&mut rng, 6, 2, 3, 3);
        let a = rand_vol(&mut rng, 6, 2, 3, 3);
        for mode in [
            AttentionMode::Quadratic,
            AttentionMode::Linear,
            AttentionMode::LinearNormalized,
        ] {
            let mut avim = Avim::new(mode, 6, 2, &mut rng);
            zero_output_proj(avim.attn.as_mut().unwrap());
            let y = avim.forward(&v, &a).unwrap();
            assert_eq!(y.data(), v.data(), "{mode:?}");
        }
        let mut avim = Avim::new(AttentionMode::Bilinear, 6, 2, &mut rng);
        let b = avim.bilinear.as_mut().unwrap();
        b.out = Linear::zeros(b.out.in_dim(), b.out.out_dim());
        let y = avim.forward(&v, &a).unwrap();
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn single_token_closed_form() {
        let mut rng = Rng::new(3);
        let p = AvimParams::new(4, &mut rng);
        let v = rand_vol(&mut rng, 4, 1, 1, 1);
        let a = rand_vol(&mut rng, 4, 1, 1, 1);
        let y = attn_quadratic(&v, &a, &p).unwrap();
        // With one token softmax is 1, so y = v + out(value(v)).
        let v_tok = to_tokens(&v).unwrap();
        let expect = v_tok
            .add(&p.output.forward(&p.value.forward(&v_tok).unwrap()).unwrap())
            .unwrap();
        for (got, want) in y.data().iter().zip(expect.data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_matches_naive_dense_reference() {
        let mut rng = Rng::new(4);
        let c = 2;
        let p = AvimParams::new(c, &mut rng);
        let v = rand_vol(&mut rng, c, 1, 2, 2); // L = 4
        let a = rand_vol(&mut rng, c, 1, 2, 2);
        let y = attn_quadratic(&v, &a, &p).unwrap();

        // Naive O(L^2) float reference straight from the definitions.
        let vt = to_tokens(&v).unwrap();
        let at = to_tokens(&a).unwrap();
        let l = 4usize;
        let lin = |lin: &Linear, x: &[f32], i: usize, o: usize| -> Vec<f32> {
            let wt = lin.weight.data();
            let b = lin.bias.data();
            let rows = x.len() / i;
            let mut out = vec![0.0f32; rows * o];
            for r in 0..rows {
                for oo in 0..o {
                    let mut acc = b[oo];
                    for ii in 0..i {
                        acc += x[r * i + ii] * wt[ii * o + oo];
                    }
                    out[r * o + oo] = acc;
                }
            }
            out
        };
        let q = lin(&p.query, vt.data(), c, c);
        let k = lin(&p.key, at.data(), c, c);
        let vv = lin(&p.value, vt.data(), c, c);
        let mut mixed = vec![0.0f32; l * c];
        for i in 0..l {
            let mut row = vec![0.0f64; l];
            for j in 0..l {
                let mut s = 0.0f64;
                for cc in 0..c {
                    s += (q[i * c + cc] * k[j * c + cc]) as f64;
                }
                row[j] = s / l as f64;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..l {
                let wgt = (exps[j] / sum) as f32;
                for cc in 0..c {
                    mixed[i * c + cc] += wgt * vv[j * c + cc];
                }
            }
        }
        let out = lin(&p.output, &mixed, c, c);
        let expect: Vec<f32> = vt.data().iter().zip(&out).map(|(a, b)| a + b).collect();
        let got = to_tokens(&y).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn linear_associativity_matches_materialized_path() {
        let mut rng = Rng::new(5);
        let c = 16;
        let p = AvimParams::new(c, &mut rng);
        let v = rand_vol(&mut rng, c, 4, 4, 4); // L = 64
        let a = rand_vol(&mut rng, c, 4, 4, 4);
        let fast = attn_linear(&v, &a, &p, false).unwrap();

        // Left-associated oracle materializing phi(Q) phi(K)^T.
        let vt = to_tokens(&v).unwrap();
        let at = to_tokens(&a).unwrap();
        let q = kernel_phi(&p.query.forward(&vt).unwrap());
        let k = kernel_phi(&p.key.forward(&at).unwrap());
        let vv = p.value.forward(&vt).unwrap();
        let big = q.matmul(&k.permute(&[1, 0]).unwrap()).unwrap(); // L x L
        let mixed = big.matmul(&vv).unwrap();
        let out = p.output.forward(&mixed).unwrap();
        let expect = vt.add(&out).unwrap();
        let got = to_tokens(&fast).unwrap();
        for (g, e) in got.data().iter().zip(expect.data()) {
            let rel = (g - e).abs() / e.abs().max(1e-3);
            assert!(rel < 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn normalized_linear_rows_are_convex_mixes() {
        // With normalization the mixing step is a convex combination of
        // value rows; sanity-check shape and finiteness of the full path.
        let mut rng = Rng::new(6);
        let c = 4;
        let p = AvimParams::new(c, &mut rng);
        let v = rand_vol(&mut rng, c, 1, 2, 2);
        let a = rand_vol(&mut rng, c, 1, 2, 2);
        let y = attn_linear(&v, &a, &p, true).unwrap();
        assert_eq!(y.shape(), v.shape());
        y.assert_finite("normalized linear attention").unwrap();
    }

    #[test]
    fn modality_shape_mismatch_is_dimension_error() {
        let mut rng = Rng::new(7);
        let avim = Avim::new(AttentionMode::Linear, 4, 2, &mut rng);
        let v = rand_vol(&mut rng, 4, 1, 2, 2);
        let a = rand_vol(&mut rng, 4, 1, 2, 3);
        assert!(matches!(avim.forward(&v, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn bilinear_zero_audio_projection() {
        let mut rng = Rng::new(8);
        let c = 4;
        let mut p = BilinearParams::new(c, 2, &mut rng);
        // Zero audio path: product term vanishes, out(0) = its bias.
        p.aud = Linear::zeros(c, 2);
        let v = rand_vol(&mut rng, c, 1, 2, 2);
        let a = rand_vol(&mut rng, c, 1, 2, 2);
        let y = bilinear_fuse(&v, &a, &p).unwrap();
        let bias = p.out.bias.data();
        let vt = to_tokens(&v).unwrap();
        let yt = to_tokens(&y).unwrap();
        for r in 0..4 {
            for cc in 0..c {
                let want = vt.data()[r * c + cc] + bias[cc];
                assert!((yt.data()[r * c + cc] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_rank_one_matches_outer_product_form() {
        let mut rng = Rng::new(9);
        let c = 4;
        let p = BilinearParams::new(c, 1, &mut rng);
        let v = rand_vol(&mut rng, c, 1, 2, 1);
        let a = rand_vol(&mut rng, c, 1, 2, 1);
        let y = bilinear_fuse(&v, &a, &p).unwrap();
        let vt = to_tokens(&v).unwrap();
        let at = to_tokens(&a).unwrap();
        let w1 = p.vis.weight.data();
        let b1 = p.vis.bias.data()[0];
        let w2 = p.aud.weight.data();
        let b2 = p.aud.bias.data()[0];
        let w3 = p.out.weight.data();
        let b3 = p.out.bias.data();
        let yt = to_tokens(&y).unwrap();
        for r in 0..2 {
            let mut sv = b1;
            let mut sa = b2;
            for cc in 0..c {
                sv += vt.data()[r * c + cc] * w1[cc];
                sa += at.data()[r * c + cc] * w2[cc];
            }
            let h = sv * sa;
            for cc in 0..c {
                let want = vt.data()[r * c + cc] + h * w3[cc] + b3[cc];
                let got = yt.data()[r * c + cc];
                assert!((got - want).abs() < 1e-5, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn quadratic_softmax_rows_sum_to_one() {
        // Checked through the public op: build scores the same way the
        // module does and verify row sums.
        let mut rng = Rng::new(10);
        let c = 8;
        let p = AvimParams::new(c, &mut rng);
        let v = rand_vol(&mut rng, c, 2, 3, 3);
        let a = rand_vol(&mut rng, c, 2, 3, 3);
        let q = p.query.forward(&to_tokens(&v).unwrap()).unwrap();
        let k = p.key.forward(&to_tokens(&a).unwrap()).unwrap();
        let l = q.shape()[0];
        let attn = q
            .matmul(&k.permute(&[1, 0]).unwrap())
            .unwrap()
            .scale(1.0 / l as f32)
            .softmax(1)
            .unwrap();
        for i in 0..l {
            let s: f32 = attn.data()[i * l..(i + 1) * l].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(attn.data()[i * l..(i + 1) * l].iter().all(|&v| v > 0.0));
        }
    }
}
