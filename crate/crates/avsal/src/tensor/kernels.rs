//! Raw compute kernels shared by the autodiff ops and by test oracles.
//!
//! Kernels are generic over the element type so the finite-difference
//! oracles in the test suite can evaluate the exact same arithmetic in
//! f64 while the tensor graph itself stays in f32. All kernels are
//! deterministic: parallel paths partition the output so that every
//! element is produced by exactly one task with a fixed inner summation
//! order.

use num_traits::Float;
use rayon::prelude::*;

/// Element type for kernels: IEEE float plus the error function.
pub trait Real: Float + Send + Sync + std::fmt::Debug + 'static {
    fn erf(self) -> Self;
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> f32 {
        libm::erff(self)
    }
    fn from_f64c(v: f64) -> f32 {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> f64 {
        libm::erf(self)
    }
    fn from_f64c(v: f64) -> f64 {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Below this many multiply-adds a matmul stays on one thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Row-major matrix product: `a` is m x k, `b` is k x n, result m x n.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, out_row: &mut [T]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// Row-major transpose of an m x n matrix.
pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 3-D cross-correlation. `in_dims`/`out_dims` are (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

/// Output extent of one convolution axis, or None when the dilated kernel
/// does not fit in the padded input.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    let span = dilation * (kernel - 1) + 1;
    if span > padded {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeom {
    pub fn kernel_volume(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }
    pub fn out_positions(&self) -> usize {
        self.out_dims[0] * self.out_dims[1] * self.out_dims[2]
    }
    pub fn in_positions(&self) -> usize {
        self.in_dims[0] * self.in_dims[1] * self.in_dims[2]
    }
}

/// Gather convolution patches: result is (in_ch * kernel_volume) x out_positions,
/// row-major, zeros where a tap lands in the padding.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let kv = g.kernel_volume();
    let po = g.out_positions();
    let [ti, hi, wi] = g.in_dims;
    let [to, ho, wo] = g.out_dims;
    let mut cols = vec![T::zero(); g.in_ch * kv * po];
    for ci in 0..g.in_ch {
        let in_base = ci * ti * hi * wi;
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = ((ci * g.kernel[0] + kt) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let out_row = &mut cols[row * po..(row + 1) * po];
                    let mut idx = 0usize;
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + kt * g.dilation[0]) as isize
                            - g.padding[0] as isize;
                        for oh in 0..ho {
                            let ih = (oh * g.stride[1] + kh * g.dilation[1]) as isize
                                - g.padding[1] as isize;
                            for ow in 0..wo {
                                let iw = (ow * g.stride[2] + kw * g.dilation[2]) as isize
                                    - g.padding[2] as isize;
                                if it >= 0
                                    && (it as usize) < ti
                                    && ih >= 0
                                    && (ih as usize) < hi
                                    && iw >= 0
                                    && (iw as usize) < wi
                                {
                                    out_row[idx] = input[in_base
                                        + (it as usize * hi + ih as usize) * wi
                                        + iw as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter patch columns back into an input-shaped
/// buffer, accumulating overlaps and dropping padding taps.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let po = g.out_positions();
    let [ti, hi, wi] = g.in_dims;
    let [to, ho, wo] = g.out_dims;
    let mut input = vec![T::zero(); g.in_ch * ti * hi * wi];
    for ci in 0..g.in_ch {
        let in_base = ci * ti * hi * wi;
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = ((ci * g.kernel[0] + kt) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let col_row = &cols[row * po..(row + 1) * po];
                    let mut idx = 0usize;
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + kt * g.dilation[0]) as isize
                            - g.padding[0] as isize;
                        for oh in 0..ho {
                            let ih = (oh * g.stride[1] + kh * g.dilation[1]) as isize
                                - g.padding[1] as isize;
                            for ow in 0..wo {
                                let iw = (ow * g.stride[2] + kw * g.dilation[2]) as isize
                                    - g.padding[2] as isize;
                                if it >= 0
                                    && (it as usize) < ti
                                    && ih >= 0
                                    && (ih as usize) < hi
                                    && iw >= 0
                                    && (iw as usize) < wi
                                {
                                    let dst = in_base
                                        + (it as usize * hi + ih as usize) * wi
                                        + iw as usize;
                                    input[dst] = input[dst] + col_row[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    input
}

/// 3-D cross-correlation. `weight` is row-major (out_ch) x (in_ch * kernel_volume),
/// result (out_ch) x out_positions. Returns the output and the patch matrix
/// (the latter is reused by the backward pass).
pub fn conv3d<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let po = g.out_positions();
    let mut out = matmul(weight, &cols, g.out_ch, g.in_ch * g.kernel_volume(), po);
    if let Some(b) = bias {
        for co in 0..g.out_ch {
            let bv = b[co];
            for o in &mut out[co * po..(co + 1) * po] {
                *o = *o + bv;
            }
        }
    }
    (out, cols)
}

/// Transposed 3-D convolution (the adjoint of a stride-`s` conv). `x` has
/// `geom.out_ch` channels over `geom.out_dims`; the result has `geom.in_ch`
/// channels over `geom.in_dims`. `weight` is (in_ch... ) laid out exactly as
/// the matching conv weight: (x-channels) x (result-channels * kernel_volume).
///
/// The geometry is expressed through the *virtual forward convolution* that
/// maps the deconv output back to the deconv input; `output_padding` is
/// already folded into `geom.in_dims` by the caller.
pub fn conv_transpose3d<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    virtual_conv: &ConvGeom,
) -> Vec<T> {
    // x plays the role of the virtual conv's output: (virtual out_ch) x positions.
    let px = virtual_conv.out_positions();
    let ck = virtual_conv.in_ch * virtual_conv.kernel_volume();
    debug_assert_eq!(x.len(), virtual_conv.out_ch * px);
    debug_assert_eq!(weight.len(), virtual_conv.out_ch * ck);
    let wt = transpose(weight, virtual_conv.out_ch, ck);
    let dcols = matmul(&wt, x, ck, virtual_conv.out_ch, px);
    let mut y = col2im(&dcols, virtual_conv);
    if let Some(b) = bias {
        let per = virtual_conv.in_positions();
        for co in 0..virtual_conv.in_ch {
            let bv = b[co];
            for o in &mut y[co * per..(co + 1) * per] {
                *o = *o + bv;
            }
        }
    }
    y
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

/// Derivative of exact GELU: Phi(x) + x * phi(x).
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_tau = T::from_f64c(1.0 / (std::f64::consts::TAU).sqrt());
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_tau * (-half * x * x).exp();
    cdf + x * pdf
}

/// Softmax along `axis` of a tensor with the given shape; max-subtracted,
/// sums accumulated in f64.
pub fn softmax_axis<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[base + j * inner].to_f64c());
            }
            let mut sum = 0.0f64;
            for j in 0..len {
                let e = (x[base + j * inner].to_f64c() - mx).exp();
                out[base + j * inner] = T::from_f64c(e);
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] = T::from_f64c(out[base + j * inner].to_f64c() / sum);
            }
        }
    }
    out
}

/// Corner-aligned source coordinate mapping for one axis.
fn resize_coords(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Trilinear resize of a (C, T, H, W) volume to (C, T', H', W') with
/// corner-aligned sampling.
pub fn upsample_trilinear<T: Real>(x: &[T], dims: [usize; 4], target: [usize; 3]) -> Vec<T> {
    let [c, ti, hi, wi] = dims;
    let [to, ho, wo] = target;
    let ct = resize_coords(ti, to);
    let ch = resize_coords(hi, ho);
    let cw = resize_coords(wi, wo);
    let mut out = vec![T::zero(); c * to * ho * wo];
    for cc in 0..c {
        let base = cc * ti * hi * wi;
        let obase = cc * to * ho * wo;
        for (ot, &(t0, t1, ft)) in ct.iter().enumerate() {
            for (oh, &(h0, h1, fh)) in ch.iter().enumerate() {
                for (ow, &(w0, w1, fw)) in cw.iter().enumerate() {
                    let at = |t: usize, h: usize, w: usize| {
                        x[base + (t * hi + h) * wi + w].to_f64c()
                    };
                    let c00 = at(t0, h0, w0) * (1.0 - fw) + at(t0, h0, w1) * fw;
                    let c01 = at(t0, h1, w0) * (1.0 - fw) + at(t0, h1, w1) * fw;
                    let c10 = at(t1, h0, w0) * (1.0 - fw) + at(t1, h0, w1) * fw;
                    let c11 = at(t1, h1, w0) * (1.0 - fw) + at(t1, h1, w1) * fw;
                    let c0 = c00 * (1.0 - fh) + c01 * fh;
                    let c1 = c10 * (1.0 - fh) + c11 * fh;
                    out[obase + (ot * ho + oh) * wo + ow] = T::from_f64c(c0 * (1.0 - ft) + c1 * ft);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_trilinear`]: scatter output-space gradients back to
/// the input grid with the same interpolation weights.
pub fn upsample_trilinear_backward<T: Real>(
    grad_out: &[T],
    dims: [usize; 4],
    target: [usize; 3],
) -> Vec<T> {
    let [c, ti, hi, wi] = dims;
    let [to, ho, wo] = target;
    let ct = resize_coords(ti, to);
    let ch = resize_coords(hi, ho);
    let cw = resize_coords(wi, wo);
    let mut gin = vec![0.0f64; c * ti * hi * wi];
    for cc in 0..c {
        let base = cc * ti * hi * wi;
        let obase = cc * to * ho * wo;
        for (ot, &(t0, t1, ft)) in ct.iter().enumerate() {
            for (oh, &(h0, h1, fh)) in ch.iter().enumerate() {
                for (ow, &(w0, w1, fw)) in cw.iter().enumerate() {
                    let g = grad_out[obase + (ot * ho + oh) * wo + ow].to_f64c();
                    let mut add = |t: usize, h: usize, w: usize, f: f64| {
                        gin[base + (t * hi + h) * wi + w] += g * f;
                    };
                    add(t0, h0, w0, (1.0 - ft) * (1.0 - fh) * (1.0 - fw));
                    add(t0, h0, w1, (1.0 - ft) * (1.0 - fh) * fw);
                    add(t0, h1, w0, (1.0 - ft) * fh * (1.0 - fw));
                    add(t0, h1, w1, (1.0 - ft) * fh * fw);
                    add(t1, h0, w0, ft * (1.0 - fh) * (1.0 - fw));
                    add(t1, h0, w1, ft * (1.0 - fh) * fw);
                    add(t1, h1, w0, ft * fh * (1.0 - fw));
                    add(t1, h1, w1, ft * fh * fw);
                }
            }
        }
    }
    gin.into_iter().map(T::from_f64c).collect()
}
