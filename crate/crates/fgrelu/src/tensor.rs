//! Dense n-dimensional arrays and the numeric kernels the engine builds on.
//!
//! Storage is a flat row-major buffer plus an explicit shape. There is no
//! implicit broadcasting beyond tensor⊙scalar; every shape mismatch is an
//! error naming both shapes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; kernel must fit inside the input.
    Valid,
    /// Zero padding chosen so the output spatial size is `ceil(in / stride)`.
    Same,
}

/// Dense tensor: row-major `data` with `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

/// Operations run in parallel only past this element-work threshold; below it
/// the rayon spawn overhead dominates.
const PAR_WORK_THRESHOLD: usize = 64 * 1024;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<Real>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<Real> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- elementwise ----

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: Real) -> Tensor {
        let data = self.data.iter().map(|a| a * c).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    // ---- linear algebra ----

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("{op}: expected rank-2 tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Standard matrix product `[n×k]·[k×m] → [n×m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree, {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[n, m]);
        matmul_into(&self.data, &other.data, &mut out.data, n, k, m);
        Ok(out)
    }

    /// `A · Bᵀ` for `A [n×k]`, `B [m×k]` → `[n×m]`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul_bt")?;
        let (m, k2) = other.dims2("matmul_bt")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_bt: inner dimensions disagree, {:?} vs {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[n, m]);
        matmul_bt_into(&self.data, &other.data, &mut out.data, n, k, m);
        Ok(out)
    }

    /// `Aᵀ · B` for `A [k×n]`, `B [k×m]` → `[n×m]`.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (k, n) = self.dims2("matmul_at")?;
        let (k2, m) = other.dims2("matmul_at")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_at: outer dimensions disagree, {:?}ᵀ vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[n, m]);
        matmul_at_into(&self.data, &other.data, &mut out.data, k, n, m);
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.dims2("transpose")?;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.data[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(out)
    }

    // ---- convolution and pooling (single sample, `[C,H,W]`) ----

    /// Cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,k,k]` kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let geom = ConvGeom::infer(self.shape(), kernels.shape(), stride, padding)?;
        let mut out = Tensor::zeros(&[geom.c_out, geom.h_out, geom.w_out]);
        conv2d_sample(&self.data, &kernels.data, None, &geom, &mut out.data);
        Ok(out)
    }

    /// Transposed convolution (`gradient-of-conv` upsampling). Input
    /// `[C_in,H,W]`, kernels `[C_out,C_in,k,k]`, output spatial size
    /// `(H−1)·stride + k`.
    pub fn conv2d_transpose(&self, kernels: &Tensor, stride: usize) -> Result<Tensor> {
        let geom = ConvTransposeGeom::infer(self.shape(), kernels.shape(), stride)?;
        let mut out = Tensor::zeros(&[geom.c_out, geom.h_out, geom.w_out]);
        conv2d_transpose_sample(&self.data, &kernels.data, None, &geom, &mut out.data);
        Ok(out)
    }

    /// 2×2 max pooling with stride 2 on a `[C,H,W]` input. Returns the pooled
    /// tensor and, per output element, the flat index of its source element
    /// (ties broken by lowest index).
    pub fn max_pool2d(&self) -> Result<(Tensor, Vec<usize>)> {
        if self.rank() != 3 {
            return Err(Error::dim(format!(
                "max_pool2d: expected [C,H,W] input, got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if h < 2 || w < 2 {
            return Err(Error::dim(format!(
                "max_pool2d: spatial dims of {:?} smaller than the 2×2 window",
                self.shape
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let mut idx = vec![0usize; c * ho * wo];
        max_pool2d_sample(&self.data, c, h, w, &mut out.data, &mut idx);
        Ok((out, idx))
    }
}

// ---- raw kernels (shared with the autograd layer) ----

/// `out[n×m] = a[n×k] · b[k×m]`; `out` must be zeroed by the caller.
pub(crate) fn matmul_into(a: &[Real], b: &[Real], out: &mut [Real], n: usize, k: usize, m: usize) {
    let body = |i: usize, orow: &mut [Real]| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * m..(l + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n * k * m >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(m).enumerate() {
            body(i, orow);
        }
    }
}

/// `out[n×m] = a[n×k] · b[m×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[Real], b: &[Real], out: &mut [Real], n: usize, k: usize, m: usize) {
    let body = |i: usize, orow: &mut [Real]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if n * k * m >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(m).enumerate() {
            body(i, orow);
        }
    }
}

/// `out[n×m] = a[k×n]ᵀ · b[k×m]`.
pub(crate) fn matmul_at_into(a: &[Real], b: &[Real], out: &mut [Real], k: usize, n: usize, m: usize) {
    let body = |i: usize, orow: &mut [Real]| {
        for l in 0..k {
            let av = a[l * n + i];
            let brow = &b[l * m..(l + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n * k * m >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(m).enumerate() {
            body(i, orow);
        }
    }
}

/// Resolved geometry of a forward convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn infer(input: &[usize], kernels: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Parameter("conv2d: stride must be ≥ 1".into()));
        }
        if input.len() != 3 {
            return Err(Error::dim(format!("conv2d: expected [C,H,W] input, got {input:?}")));
        }
        if kernels.len() != 4 || kernels[2] != kernels[3] {
            return Err(Error::dim(format!(
                "conv2d: expected [C_out,C_in,k,k] kernels, got {kernels:?}"
            )));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc_in, k) = (kernels[0], kernels[1], kernels[2]);
        if kc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d: input channels {c_in} (shape {input:?}) != kernel channels {kc_in} (shape {kernels:?})"
            )));
        }
        let (pad_top, pad_left, h_out, w_out) = match padding {
            Padding::Valid => {
                if k > h || k > w {
                    return Err(Error::dim(format!(
                        "conv2d: kernel {kernels:?} larger than input {input:?} under valid padding"
                    )));
                }
                (0, 0, (h - k) / stride + 1, (w - k) / stride + 1)
            }
            Padding::Same => {
                let h_out = h.div_ceil(stride);
                let w_out = w.div_ceil(stride);
                let pad_h = ((h_out - 1) * stride + k).saturating_sub(h);
                let pad_w = ((w_out - 1) * stride + k).saturating_sub(w);
                (pad_h / 2, pad_w / 2, h_out, w_out)
            }
        };
        Ok(ConvGeom { c_in, h, w, c_out, k, stride, pad_top, pad_left, h_out, w_out })
    }
}

/// One-sample conv forward: `out[F,H',W'] = correlate(input[C,H,W], kernels) (+ bias)`.
pub(crate) fn conv2d_sample(input: &[Real], kernels: &[Real], bias: Option<&[Real]>, g: &ConvGeom, out: &mut [Real]) {
    let ksz = g.k * g.k;
    let plane = g.h * g.w;
    let oplane = g.h_out * g.w_out;
    for f in 0..g.c_out {
        let kbase = f * g.c_in * ksz;
        let obase = f * oplane;
        let b = bias.map_or(0.0, |b| b[f]);
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let mut acc = b;
                for c in 0..g.c_in {
                    for di in 0..g.k {
                        let ih = (oh * g.stride + di) as isize - g.pad_top as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let irow = c * plane + ih as usize * g.w;
                        let krow = kbase + c * ksz + di * g.k;
                        for dj in 0..g.k {
                            let iw = (ow * g.stride + dj) as isize - g.pad_left as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            acc += input[irow + iw as usize] * kernels[krow + dj];
                        }
                    }
                }
                out[obase + oh * g.w_out + ow] = acc;
            }
        }
    }
}

/// One-sample conv backward: accumulates into `d_input`, `d_kernels`, `d_bias`.
pub(crate) fn conv2d_backward_sample(
    input: &[Real],
    kernels: &[Real],
    d_out: &[Real],
    g: &ConvGeom,
    d_input: &mut [Real],
    d_kernels: &mut [Real],
    d_bias: Option<&mut [Real]>,
) {
    let ksz = g.k * g.k;
    let plane = g.h * g.w;
    let oplane = g.h_out * g.w_out;
    if let Some(db) = d_bias {
        for f in 0..g.c_out {
            db[f] += d_out[f * oplane..(f + 1) * oplane].iter().sum::<Real>();
        }
    }
    for f in 0..g.c_out {
        let kbase = f * g.c_in * ksz;
        let obase = f * oplane;
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let go = d_out[obase + oh * g.w_out + ow];
                if go == 0.0 {
                    continue;
                }
                for c in 0..g.c_in {
                    for di in 0..g.k {
                        let ih = (oh * g.stride + di) as isize - g.pad_top as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let irow = c * plane + ih as usize * g.w;
                        let krow = kbase + c * ksz + di * g.k;
                        for dj in 0..g.k {
                            let iw = (ow * g.stride + dj) as isize - g.pad_left as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            d_input[irow + iw as usize] += go * kernels[krow + dj];
                            d_kernels[krow + dj] += go * input[irow + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Resolved geometry of a transposed convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvTransposeGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvTransposeGeom {
    pub fn infer(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Parameter("conv2d_transpose: stride must be ≥ 1".into()));
        }
        if input.len() != 3 {
            return Err(Error::dim(format!(
                "conv2d_transpose: expected [C,H,W] input, got {input:?}"
            )));
        }
        if kernels.len() != 4 || kernels[2] != kernels[3] {
            return Err(Error::dim(format!(
                "conv2d_transpose: expected [C_out,C_in,k,k] kernels, got {kernels:?}"
            )));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc_in, k) = (kernels[0], kernels[1], kernels[2]);
        if kc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d_transpose: input channels {c_in} (shape {input:?}) != kernel channels {kc_in} (shape {kernels:?})"
            )));
        }
        Ok(ConvTransposeGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            h_out: (h - 1) * stride + k,
            w_out: (w - 1) * stride + k,
        })
    }
}

/// One-sample transposed-conv forward (scatter form).
pub(crate) fn conv2d_transpose_sample(
    input: &[Real],
    kernels: &[Real],
    bias: Option<&[Real]>,
    g: &ConvTransposeGeom,
    out: &mut [Real],
) {
    let ksz = g.k * g.k;
    let plane = g.h * g.w;
    let oplane = g.h_out * g.w_out;
    if let Some(b) = bias {
        for co in 0..g.c_out {
            out[co * oplane..(co + 1) * oplane].fill(b[co]);
        }
    }
    for ci in 0..g.c_in {
        for i in 0..g.h {
            for j in 0..g.w {
                let v = input[ci * plane + i * g.w + j];
                if v == 0.0 {
                    continue;
                }
                for co in 0..g.c_out {
                    let kbase = (co * g.c_in + ci) * ksz;
                    for di in 0..g.k {
                        let orow = co * oplane + (i * g.stride + di) * g.w_out + j * g.stride;
                        let krow = kbase + di * g.k;
                        for dj in 0..g.k {
                            out[orow + dj] += v * kernels[krow + dj];
                        }
                    }
                }
            }
        }
    }
}

/// One-sample transposed-conv backward.
pub(crate) fn conv2d_transpose_backward_sample(
    input: &[Real],
    kernels: &[Real],
    d_out: &[Real],
    g: &ConvTransposeGeom,
    d_input: &mut [Real],
    d_kernels: &mut [Real],
    d_bias: Option<&mut [Real]>,
) {
    let ksz = g.k * g.k;
    let plane = g.h * g.w;
    let oplane = g.h_out * g.w_out;
    if let Some(db) = d_bias {
        for co in 0..g.c_out {
            db[co] += d_out[co * oplane..(co + 1) * oplane].iter().sum::<Real>();
        }
    }
    for ci in 0..g.c_in {
        for i in 0..g.h {
            for j in 0..g.w {
                let x = input[ci * plane + i * g.w + j];
                let mut acc = 0.0;
                for co in 0..g.c_out {
                    let kbase = (co * g.c_in + ci) * ksz;
                    for di in 0..g.k {
                        let orow = co * oplane + (i * g.stride + di) * g.w_out + j * g.stride;
                        let krow = kbase + di * g.k;
                        for dj in 0..g.k {
                            let go = d_out[orow + dj];
                            acc += go * kernels[krow + dj];
                            d_kernels[krow + dj] += go * x;
                        }
                    }
                }
                d_input[ci * plane + i * g.w + j] += acc;
            }
        }
    }
}

/// One-sample 2×2/stride-2 max pool; writes pooled values and flat argmax
/// indices (lowest index wins ties).
pub(crate) fn max_pool2d_sample(input: &[Real], c: usize, h: usize, w: usize, out: &mut [Real], idx: &mut [usize]) {
    let (ho, wo) = (h / 2, w / 2);
    let plane = h * w;
    let oplane = ho * wo;
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let base = ch * plane + (oh * 2) * w + ow * 2;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out[ch * oplane + oh * wo + ow] = input[best];
                idx[ch * oplane + oh * wo + ow] = best;
            }
        }
    }
}
