//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly; when an operand is tracked
//! it also records a backward closure on the result. Closures only push
//! gradients into tracked parents, so untracked subgraphs cost nothing.

use super::kernels::{self, ConvGeom};
use super::{BackwardFn, Tensor, TensorInner};
use crate::error::{Error, Result};

type Triple = [usize; 3];

fn with_grad<'a>(out: &'a TensorInner) -> std::cell::Ref<'a, Vec<f32>> {
    std::cell::Ref::map(out.grad.borrow(), |g| {
        g.as_ref().expect("backward reached node without gradient")
    })
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn finish(shape: Vec<usize>, data: Vec<f32>, parents: Vec<Tensor>, back: BackwardFn) -> Tensor {
    if parents.iter().any(Tensor::is_tracked) {
        Tensor::node(shape, data, parents, back)
    } else {
        Tensor::from_vec(&shape, data).expect("op produced shape/data mismatch")
    }
}

/// Transposed matmul helper: a (m x k) times b^T where b is (n x k).
fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

impl Tensor {
    // ----- elementwise binary ------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let (a, b) = (self.clone(), other.clone());
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                a.accumulate_grad(&g);
            }
            if b.is_tracked() {
                b.accumulate_grad(&g);
            }
        });
        Ok(finish(self.shape().to_vec(), data, vec![self.clone(), other.clone()], back))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let (a, b) = (self.clone(), other.clone());
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                a.accumulate_grad(&g);
            }
            if b.is_tracked() {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                drop(g);
                b.accumulate_grad(&neg);
            }
        });
        Ok(finish(self.shape().to_vec(), data, vec![self.clone(), other.clone()], back))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                let da: Vec<f32> = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                let db: Vec<f32> = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                drop(g);
                b.accumulate_grad(&db);
            }
        });
        Ok(finish(self.shape().to_vec(), data, vec![self.clone(), other.clone()], back))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let (a, b) = (self.clone(), other.clone());
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                let da: Vec<f32> = g.iter().zip(b.data()).map(|(g, y)| g / y).collect();
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                let db: Vec<f32> = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                drop(g);
                b.accumulate_grad(&db);
            }
        });
        Ok(finish(self.shape().to_vec(), data, vec![self.clone(), other.clone()], back))
    }

    /// Elementwise minimum; at ties the gradient goes to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("minimum", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a.min(*b)).collect();
        let (a, b) = (self.clone(), other.clone());
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                let da: Vec<f32> = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                    .collect();
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                let db: Vec<f32> = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| if y < x { *g } else { 0.0 })
                    .collect();
                drop(g);
                b.accumulate_grad(&db);
            }
        });
        Ok(finish(self.shape().to_vec(), data, vec![self.clone(), other.clone()], back))
    }

    // ----- scalar / unary ----------------------------------------------------

    pub fn scale(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g.iter().map(|v| v * s).collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            a.accumulate_grad(&g);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Exact GELU (erf form).
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| kernels::gelu(v)).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| g * kernels::gelu_grad(x))
                .collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g
                .iter()
                .zip(&out.data)
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    /// Natural log; caller guarantees positive inputs (see `clamp_min`).
    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g.iter().zip(a.data()).map(|(g, x)| g / x).collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.sqrt()).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g
                .iter()
                .zip(&out.data)
                .map(|(g, &y)| g / (2.0 * y))
                .collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    /// max(x, floor); gradient passes only where x > floor.
    pub fn clamp_min(&self, floor: f32) -> Tensor {
        let data = self.data().iter().map(|v| v.max(floor)).collect();
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da: Vec<f32> = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                .collect();
            drop(g);
            a.accumulate_grad(&da);
        });
        finish(self.shape().to_vec(), data, vec![self.clone()], back)
    }

    // ----- matmul ------------------------------------------------------------

    /// Matrix product over the last two axes. Leading batch axes must match
    /// exactly, or one operand may omit them entirely (it is then shared
    /// across the batch). No other broadcasting.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (self.shape(), other.shape());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2, got {ashape:?} and {bshape:?}"
            )));
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {ashape:?} x {bshape:?}"
            )));
        }
        let abatch = &ashape[..ashape.len() - 2];
        let bbatch = &bshape[..bbatch_len(bshape)];
        if !abatch.is_empty() && !bbatch.is_empty() && abatch != bbatch {
            return Err(Error::dim(format!(
                "matmul batch extents differ: {ashape:?} x {bshape:?}"
            )));
        }
        let batch_dims: Vec<usize> =
            if abatch.is_empty() { bbatch.to_vec() } else { abatch.to_vec() };
        let batch: usize = batch_dims.iter().product();
        let (a_step, b_step) = (
            if abatch.is_empty() { 0 } else { m * ka },
            if bbatch.is_empty() { 0 } else { kb * n },
        );

        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let asl = &self.data()[bi * a_step..bi * a_step + m * ka];
            let bsl = &other.data()[bi * b_step..bi * b_step + kb * n];
            data.extend_from_slice(&kernels::matmul(asl, bsl, m, ka, n));
        }
        let mut out_shape = batch_dims.clone();
        out_shape.push(m);
        out_shape.push(n);

        let (a, b) = (self.clone(), other.clone());
        let k = ka;
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            if a.is_tracked() {
                // dA[i,j] = sum_l dC[i,l] * B[j,l]
                let mut da = vec![0.0f32; a.len()];
                for bi in 0..batch {
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let bsl = &b.data()[bi * b_step..bi * b_step + k * n];
                    let part = matmul_nt(gsl, bsl, m, n, k);
                    let dst = &mut da[bi * a_step..bi * a_step + m * k];
                    for (d, p) in dst.iter_mut().zip(&part) {
                        *d += p;
                    }
                }
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                // dB = A^T . dC
                let mut db = vec![0.0f32; b.len()];
                for bi in 0..batch {
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &a.data()[bi * a_step..bi * a_step + m * k];
                    let at = kernels::transpose(asl, m, k);
                    let part = kernels::matmul(&at, gsl, k, m, n);
                    let dst = &mut db[bi * b_step..bi * b_step + k * n];
                    for (d, p) in dst.iter_mut().zip(&part) {
                        *d += p;
                    }
                }
                drop(g);
                b.accumulate_grad(&db);
            }
        });
        Ok(finish(out_shape, data, vec![self.clone(), other.clone()], back))
    }

    // ----- convolution -------------------------------------------------------

    /// 3-D cross-correlation of a (C_in, T, H, W) input with a
    /// (C_out, C_in, kt, kh, kw) weight.
    pub fn conv3d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: Triple,
        dilation: Triple,
        padding: Triple,
    ) -> Result<Tensor> {
        let ishape = self.shape();
        let wshape = weight.shape();
        if ishape.len() != 4 || wshape.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects input rank 4 and weight rank 5, got {ishape:?} / {wshape:?}"
            )));
        }
        if ishape[0] != wshape[1] {
            return Err(Error::dim(format!(
                "conv3d channel mismatch: input {ishape:?} vs weight {wshape:?}"
            )));
        }
        if dilation.iter().any(|&d| d == 0) || stride.iter().any(|&s| s == 0) {
            return Err(Error::Config("conv3d stride/dilation must be >= 1".into()));
        }
        let mut out_dims = [0usize; 3];
        for ax in 0..3 {
            out_dims[ax] = kernels::conv_out_extent(
                ishape[1 + ax],
                wshape[2 + ax],
                stride[ax],
                dilation[ax],
                padding[ax],
            )
            .ok_or_else(|| {
                Error::dim(format!(
                    "conv3d kernel {:?} (dilation {:?}) exceeds padded input {:?} (padding {:?})",
                    &wshape[2..],
                    dilation,
                    &ishape[1..],
                    padding
                ))
            })?;
        }
        if let Some(b) = bias {
            if b.shape() != [wshape[0]] {
                return Err(Error::dim(format!(
                    "conv3d bias shape {:?}, expected [{}]",
                    b.shape(),
                    wshape[0]
                )));
            }
        }
        let geom = ConvGeom {
            in_ch: ishape[0],
            out_ch: wshape[0],
            in_dims: [ishape[1], ishape[2], ishape[3]],
            out_dims,
            kernel: [wshape[2], wshape[3], wshape[4]],
            stride,
            dilation,
            padding,
        };
        let (data, cols) =
            kernels::conv3d(self.data(), weight.data(), bias.map(Tensor::data), &geom);
        let out_shape = vec![geom.out_ch, out_dims[0], out_dims[1], out_dims[2]];

        let (x, w) = (self.clone(), weight.clone());
        let bias_t = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = &bias_t {
            parents.push(b.clone());
        }
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let po = geom.out_positions();
            let ck = geom.in_ch * geom.kernel_volume();
            if w.is_tracked() {
                // dW = dY . cols^T
                let dw = matmul_nt(&g, &cols, geom.out_ch, po, ck);
                w.accumulate_grad(&dw);
            }
            if x.is_tracked() {
                // dX = col2im(W^T . dY)
                let wt = kernels::transpose(w.data(), geom.out_ch, ck);
                let dcols = kernels::matmul(&wt, &g, ck, geom.out_ch, po);
                let dx = kernels::col2im(&dcols, &geom);
                x.accumulate_grad(&dx);
            }
            if let Some(b) = &bias_t {
                if b.is_tracked() {
                    let mut db = vec![0.0f32; geom.out_ch];
                    for co in 0..geom.out_ch {
                        let mut acc = 0.0f64;
                        for v in &g[co * po..(co + 1) * po] {
                            acc += *v as f64;
                        }
                        db[co] = acc as f32;
                    }
                    drop(g);
                    b.accumulate_grad(&db);
                }
            }
        });
        Ok(finish(out_shape, data, parents, back))
    }

    /// Transposed 3-D convolution (adjoint of `conv3d` with dilation 1).
    /// Input is (C_in, T, H, W), weight (C_in, C_out, kt, kh, kw); each output
    /// extent is `(in-1)*stride - 2*padding + kernel + output_padding`.
    pub fn conv_transpose3d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: Triple,
        padding: Triple,
        output_padding: Triple,
    ) -> Result<Tensor> {
        let xshape = self.shape();
        let wshape = weight.shape();
        if xshape.len() != 4 || wshape.len() != 5 {
            return Err(Error::dim(format!(
                "conv_transpose3d expects input rank 4 and weight rank 5, got {xshape:?} / {wshape:?}"
            )));
        }
        if xshape[0] != wshape[0] {
            return Err(Error::dim(format!(
                "conv_transpose3d channel mismatch: input {xshape:?} vs weight {wshape:?}"
            )));
        }
        let mut out_dims = [0usize; 3];
        for ax in 0..3 {
            if output_padding[ax] >= stride[ax] {
                return Err(Error::Config(format!(
                    "conv_transpose3d output_padding {output_padding:?} must be < stride {stride:?}"
                )));
            }
            let base = (xshape[1 + ax] - 1) * stride[ax] + wshape[2 + ax];
            let sub = 2 * padding[ax];
            if base + output_padding[ax] <= sub {
                return Err(Error::dim(format!(
                    "conv_transpose3d produces empty output on axis {ax}"
                )));
            }
            out_dims[ax] = base + output_padding[ax] - sub;
        }
        if let Some(b) = bias {
            if b.shape() != [wshape[1]] {
                return Err(Error::dim(format!(
                    "conv_transpose3d bias shape {:?}, expected [{}]",
                    b.shape(),
                    wshape[1]
                )));
            }
        }
        // Virtual forward conv mapping the deconv output back to its input.
        let geom = ConvGeom {
            in_ch: wshape[1],
            out_ch: xshape[0],
            in_dims: out_dims,
            out_dims: [xshape[1], xshape[2], xshape[3]],
            kernel: [wshape[2], wshape[3], wshape[4]],
            stride,
            dilation: [1, 1, 1],
            padding,
        };
        let data =
            kernels::conv_transpose3d(self.data(), weight.data(), bias.map(Tensor::data), &geom);
        let out_shape = vec![geom.in_ch, out_dims[0], out_dims[1], out_dims[2]];

        let (x, w) = (self.clone(), weight.clone());
        let bias_t = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = &bias_t {
            parents.push(b.clone());
        }
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let ck = geom.in_ch * geom.kernel_volume();
            let px = geom.out_positions();
            // Shared patch matrix of the upstream gradient.
            let cols_g = kernels::im2col(&g, &geom);
            if x.is_tracked() {
                // dX = W . im2col(dY) : the virtual conv applied to dY.
                let dx = kernels::matmul(w.data(), &cols_g, geom.out_ch, ck, px);
                x.accumulate_grad(&dx);
            }
            if w.is_tracked() {
                // dW = X . im2col(dY)^T
                let dw = matmul_nt(x.data(), &cols_g, geom.out_ch, px, ck);
                w.accumulate_grad(&dw);
            }
            if let Some(b) = &bias_t {
                if b.is_tracked() {
                    let per = geom.in_positions();
                    let mut db = vec![0.0f32; geom.in_ch];
                    for co in 0..geom.in_ch {
                        let mut acc = 0.0f64;
                        for v in &g[co * per..(co + 1) * per] {
                            acc += *v as f64;
                        }
                        db[co] = acc as f32;
                    }
                    drop(g);
                    b.accumulate_grad(&db);
                }
            }
        });
        Ok(finish(out_shape, data, parents, back))
    }

    // ----- softmax -----------------------------------------------------------

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let data = kernels::softmax_axis(self.data(), &shape, axis);
        let a = self.clone();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let y = &out.data;
            let mut da = vec![0.0f32; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0f64;
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += (g[idx] * y[idx]) as f64;
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        da[idx] = y[idx] * (g[idx] - dot as f32);
                    }
                }
            }
            drop(g);
            a.accumulate_grad(&da);
        });
        Ok(finish(shape, data, vec![self.clone()], back))
    }

    // ----- reductions ----------------------------------------------------------

    fn reduce(&self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Tensor> {
        if axes.is_empty() {
            return Err(Error::dim("reduce: empty axis set"));
        }
        let rank = self.rank();
        let mut mask = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::dim(format!(
                    "reduce axis {ax} out of range for shape {:?}",
                    self.shape()
                )));
            }
            if mask[ax] {
                return Err(Error::dim(format!("reduce axis {ax} repeated")));
            }
            mask[ax] = true;
        }
        let in_shape = self.shape().to_vec();
        let mut out_shape: Vec<usize> = Vec::new();
        for (d, &m) in in_shape.iter().zip(&mask) {
            if m {
                if keepdim {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(*d);
            }
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = in_shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(d, _)| d)
            .product();
        let out_len: usize = out_shape.iter().product();

        // Strides of the output in input-index space.
        let mut out_strides = vec![0usize; rank];
        {
            let mut s = 1usize;
            for ax in (0..rank).rev() {
                if !mask[ax] {
                    out_strides[ax] = s;
                    s *= in_shape[ax];
                }
            }
        }
        let mut acc = vec![0.0f64; out_len];
        let mut idx = vec![0usize; rank];
        for &v in self.data() {
            let mut o = 0usize;
            for ax in 0..rank {
                if !mask[ax] {
                    o += idx[ax] * out_strides[ax];
                }
            }
            acc[o] += v as f64;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < in_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let data: Vec<f32> = acc.iter().map(|v| (v * scale) as f32).collect();

        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let gscale = if mean { 1.0 / count as f32 } else { 1.0 };
            let mut da = vec![0.0f32; a.len()];
            let mut idx = vec![0usize; rank];
            for d in da.iter_mut() {
                let mut o = 0usize;
                for ax in 0..rank {
                    if !mask[ax] {
                        o += idx[ax] * out_strides[ax];
                    }
                }
                *d = g[o] * gscale;
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < in_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            drop(g);
            a.accumulate_grad(&da);
        });
        Ok(finish(out_shape, data, vec![self.clone()], back))
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.reduce(axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.reduce(axes, keepdim, true)
    }

    /// Sum of all elements as a scalar tensor (f64 accumulation).
    pub fn sum_all(&self) -> Tensor {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&all, false, false).expect("sum_all on rank >= 1")
    }

    pub fn mean_all(&self) -> Tensor {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&all, false, true).expect("mean_all on rank >= 1")
    }

    // ----- shape manipulation ---------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            a.accumulate_grad(&g);
        });
        Ok(finish(shape.to_vec(), self.data().to_vec(), vec![self.clone()], back))
    }

    /// Reorder axes: `perm[i]` names the source axis placed at position `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.data(), &in_shape, perm);
        // Inverse permutation for the backward remap.
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let a = self.clone();
        let out_shape_b = out_shape.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da = permute_data(&g, &out_shape_b, &inv);
            drop(g);
            a.accumulate_grad(&da);
        });
        Ok(finish(out_shape, data, vec![self.clone()], back))
    }

    /// Broadcast axes of extent 1 up to `target` (same rank). The adjoint
    /// sums over the broadcast axes.
    pub fn expand(&self, target: &[usize]) -> Result<Tensor> {
        let in_shape = self.shape().to_vec();
        if target.len() != in_shape.len()
            || in_shape
                .iter()
                .zip(target)
                .any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::dim(format!(
                "cannot expand {in_shape:?} to {target:?}"
            )));
        }
        let rank = in_shape.len();
        let mut in_strides = vec![0usize; rank];
        {
            let mut s = 1;
            for ax in (0..rank).rev() {
                in_strides[ax] = if in_shape[ax] == 1 { 0 } else { s };
                s *= in_shape[ax];
            }
        }
        let out_len: usize = target.iter().product();
        let mut data = vec![0.0f32; out_len];
        let mut idx = vec![0usize; rank];
        let src = self.data();
        for d in data.iter_mut() {
            let mut o = 0;
            for ax in 0..rank {
                o += idx[ax] * in_strides[ax];
            }
            *d = src[o];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let a = self.clone();
        let target_b = target.to_vec();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let mut da = vec![0.0f32; a.len()];
            let mut idx = vec![0usize; rank];
            for &gv in g.iter() {
                let mut o = 0;
                for ax in 0..rank {
                    o += idx[ax] * in_strides[ax];
                }
                da[o] += gv;
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < target_b[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            drop(g);
            a.accumulate_grad(&da);
        });
        Ok(finish(target.to_vec(), data, vec![self.clone()], back))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::dim("concat rank mismatch"));
            }
            for ax in 0..rank {
                if ax != axis && p.shape()[ax] != parts[0].shape()[ax] {
                    return Err(Error::dim(format!(
                        "concat: shapes {:?} and {:?} differ off-axis",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();

        let mut data = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let pa = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let owned_b = owned.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let mut offset = 0usize;
            for p in &owned_b {
                let pa = p.shape()[axis];
                if p.is_tracked() {
                    let mut dp = vec![0.0f32; p.len()];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        dp[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&g[src_base..src_base + pa * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += pa;
            }
        });
        Ok(finish(out_shape, data, owned, back))
    }

    // ----- resampling ----------------------------------------------------------

    /// Corner-aligned trilinear resize of a (C, T, H, W) tensor.
    pub fn upsample_trilinear(&self, target: Triple) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::dim(format!(
                "upsample_trilinear expects rank 4, got {:?}",
                self.shape()
            )));
        }
        if target.iter().any(|&t| t == 0) {
            return Err(Error::dim("upsample target extents must be >= 1"));
        }
        let dims = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if [dims[1], dims[2], dims[3]] == target {
            // Same-shape resize is the identity.
            return self.reshape(self.shape());
        }
        let data = kernels::upsample_trilinear(self.data(), dims, target);
        let out_shape = vec![dims[0], target[0], target[1], target[2]];
        let a = self.clone();
        let back: BackwardFn = Box::new(move |out| {
            let g = with_grad(out);
            let da = kernels::upsample_trilinear_backward(&g, dims, target);
            drop(g);
            a.accumulate_grad(&da);
        });
        Ok(finish(out_shape, data, vec![self.clone()], back))
    }
}

fn bbatch_len(bshape: &[usize]) -> usize {
    bshape.len() - 2
}

fn permute_data(src: &[f32], in_shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_shape[ax + 1];
    }
    let mut out = vec![0.0f32; src.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src_off = 0;
        for (ax, &p) in perm.iter().enumerate() {
            src_off += idx[ax] * in_strides[p];
        }
        *o = src[src_off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 2], vec![3.0, -1.0, 2.0, 5.0]);
        let y = i2.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_reference_product() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[2, 2], vec![0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_on_random_8x8() {
        let mut rng = crate::rng::Rng::new(17);
        let mk = |rng: &mut crate::rng::Rng| {
            t(&[8, 8], (0..64).map(|_| rng.range_f32(-1.0, 1.0)).collect())
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0), "{l} vs {r}");
        }
    }

    #[test]
    fn conv3d_identity_kernel() {
        let x = t(&[1, 2, 3, 3], (0..18).map(|v| v as f32).collect());
        let w = t(&[1, 1, 1, 1, 1], vec![1.0]);
        let y = x.conv3d(&w, None, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3d_counting_case() {
        let x = t(&[1, 3, 3, 3], vec![1.0; 27]);
        let w = t(&[1, 1, 3, 3, 3], vec![1.0; 27]);
        let y = x.conv3d(&w, None, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 27.0);
    }

    #[test]
    fn conv3d_dilation_matches_naive_loops() {
        let mut rng = crate::rng::Rng::new(3);
        let (ci, co) = (2, 3);
        let (ti, hi, wi) = (4, 6, 6);
        let k = [1usize, 3, 3];
        let dil = [1usize, 2, 2];
        let x = t(
            &[ci, ti, hi, wi],
            (0..ci * ti * hi * wi).map(|_| rng.range_f32(-1.0, 1.0)).collect(),
        );
        let w = t(
            &[co, ci, k[0], k[1], k[2]],
            (0..co * ci * k[0] * k[1] * k[2]).map(|_| rng.range_f32(-1.0, 1.0)).collect(),
        );
        let y = x.conv3d(&w, None, [1, 1, 1], dil, [0, 0, 0]).unwrap();
        let (to, ho, wo) = (4, 2, 2);
        assert_eq!(y.shape(), &[co, to, ho, wo]);
        for c in 0..co {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f64;
                        for cin in 0..ci {
                            for kt in 0..k[0] {
                                for kh in 0..k[1] {
                                    for kw in 0..k[2] {
                                        let iv = x.at(&[
                                            cin,
                                            ot + kt * dil[0],
                                            oh + kh * dil[1],
                                            ow + kw * dil[2],
                                        ]);
                                        let wv = w.at(&[c, cin, kt, kh, kw]);
                                        acc += (iv * wv) as f64;
                                    }
                                }
                            }
                        }
                        let got = y.at(&[c, ot, oh, ow]);
                        assert!(
                            (got as f64 - acc).abs() < 1e-5,
                            "mismatch at [{c},{ot},{oh},{ow}]: {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_dilation_equals_zero_inflated_kernel() {
        let mut rng = crate::rng::Rng::new(9);
        let x = t(&[1, 3, 7, 7], (0..147).map(|_| rng.range_f32(-1.0, 1.0)).collect());
        let w = t(&[2, 1, 1, 3, 3], (0..18).map(|_| rng.range_f32(-1.0, 1.0)).collect());
        // Inflate the 3x3 spatial kernel to 5x5 with zeros between taps.
        let mut inflated = vec![0.0f32; 2 * 1 * 1 * 5 * 5];
        for c in 0..2 {
            for kh in 0..3 {
                for kw in 0..3 {
                    inflated[c * 25 + (kh * 2) * 5 + kw * 2] = w.at(&[c, 0, 0, kh, kw]);
                }
            }
        }
        let wi = t(&[2, 1, 1, 5, 5], inflated);
        let a = x.conv3d(&w, None, [1, 1, 1], [1, 2, 2], [0, 0, 0]).unwrap();
        let b = x.conv3d(&wi, None, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (av, bv) in a.data().iter().zip(b.data()) {
            assert!((av - bv).abs() < 1e-6);
        }
    }

    #[test]
    fn conv3d_kernel_too_large_is_dimension_error() {
        let x = t(&[1, 1, 2, 2], vec![0.0; 4]);
        let w = t(&[1, 1, 1, 3, 3], vec![0.0; 9]);
        let err = x.conv3d(&w, None, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn conv_transpose_roundtrips_shape() {
        // Strided conv halves an even extent; the transpose with
        // output_padding 1 restores it exactly.
        let x = t(&[1, 1, 4, 6], (0..24).map(|v| v as f32 * 0.1).collect());
        let wdn = t(&[2, 1, 1, 3, 3], (0..18).map(|v| v as f32 * 0.01).collect());
        let down = x.conv3d(&wdn, None, [1, 2, 2], [1, 1, 1], [0, 1, 1]).unwrap();
        assert_eq!(down.shape(), &[2, 1, 2, 3]);
        let wup = t(&[2, 1, 1, 3, 3], (0..18).map(|v| v as f32 * 0.01).collect());
        let up = down
            .conv_transpose3d(&wup, None, [1, 2, 2], [0, 1, 1], [0, 1, 1])
            .unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 6]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = t(&[2, 4], vec![0.0, 1.0, -2.0, 3.0, 5.0, 5.0, 5.0, 5.0]);
        let y = x.softmax(1).unwrap();
        for row in 0..2 {
            let s: f32 = y.data()[row * 4..(row + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(&y.data()[4..8], &[0.25, 0.25, 0.25, 0.25]);
        let shifted = x.add_scalar(13.5).softmax(1).unwrap();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_two_element_closed_form() {
        let x = t(&[2], vec![0.0, 3.0f32.ln()]);
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn reduce_examples() {
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(z.sum_all().item(), 0.0);
        let x = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.mean_all().item(), 2.5);
        let err = x.sum_axes(&[], false).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn reduce_axes_compose() {
        let mut rng = crate::rng::Rng::new(5);
        let x = t(&[3, 4, 5], (0..60).map(|_| rng.range_f32(-2.0, 2.0)).collect());
        let all = x.sum_all().item() as f64;
        let seq = x
            .sum_axes(&[0], false)
            .unwrap()
            .sum_axes(&[1], false)
            .unwrap()
            .sum_axes(&[0], false)
            .unwrap()
            .item() as f64;
        assert!((all - seq).abs() < 1e-6, "{all} vs {seq}");
    }

    #[test]
    fn upsample_constant_identity_and_ramp() {
        let c = Tensor::full(&[2, 1, 2, 2], 3.25);
        let up = c.upsample_trilinear([3, 5, 7]).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));

        let x = t(&[1, 1, 1, 2], vec![0.0, 1.0]);
        let y = x.upsample_trilinear([1, 1, 3]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);

        let same = x.upsample_trilinear([1, 1, 2]).unwrap();
        assert_eq!(same.data(), x.data());
    }

    #[test]
    fn expand_and_concat() {
        let x = t(&[2, 1], vec![1.0, 2.0]);
        let e = x.expand(&[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let y = t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = Tensor::concat(&[&x, &y], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 5.0, 6.0, 2.0, 7.0, 8.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], (0..24).map(|v| v as f32).collect());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gelu_examples() {
        let x = t(&[3], vec![0.0, 10.0, 1.0]);
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!((y.data()[2] - 0.84134).abs() < 1e-4);
    }
}
