//! Dense NCHW tensors and the convolution kernels the autograd tape is built on.
//!
//! Convolutions are lowered to GEMM through an im2col/col2im pair. The column
//! layout is `[channels * k * k, batch * out_h * out_w]` so a whole batch goes
//! through a single matrix product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected NCHW tensor, got shape {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Slice of sample `i` along the leading dimension.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }

    /// Copy of the listed samples, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { shape, data }
    }

    pub(crate) fn take_data(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    /// Refill a tensor whose data was taken; the length must match the shape.
    pub(crate) fn restore_data(&mut self, data: Vec<f64>) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {numel} elements, got {}", self.shape, data.len())));
        }
        self.data = data;
        Ok(())
    }

    /// Copy of samples `[start, end)` along the leading dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * per..end * per].to_vec() }
    }

    /// Concatenate batched tensors along the leading dimension.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!("cannot concat {:?} with {:?}", first.shape, p.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = op(a) * op(b) + beta * c` over row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above against the m/k/n extents the
    // strides describe, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `h x w` input.
    pub fn forward(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!("kernel {k} larger than padded input {h}x{w} (pad {pad})")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, c, h, w, k, stride, pad, oh, ow })
    }

    pub fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols_len(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let l = g.oh * g.ow;
    let ncols = g.n * l;
    let mut cols = vec![0.0; g.cols_rows() * ncols];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[ni * l..(ni + 1) * l];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto an `n x c x h x w` image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let l = g.oh * g.ow;
    let ncols = g.n * l;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[ni * l..(ni + 1) * l];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src_seg = &src[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, s) in src_seg.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, l]` -> `[c, n * l]`.
pub(crate) fn nchw_to_cn(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * l + ni * l..ci * n * l + (ni + 1) * l]
                .copy_from_slice(&x[(ni * c + ci) * l..(ni * c + ci + 1) * l]);
        }
    }
    out
}

/// `[c, n * l]` -> `[n, c, l]`.
pub(crate) fn cn_to_nchw(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * l..(ni * c + ci + 1) * l]
                .copy_from_slice(&x[ci * n * l + ni * l..ci * n * l + (ni + 1) * l]);
        }
    }
    out
}
