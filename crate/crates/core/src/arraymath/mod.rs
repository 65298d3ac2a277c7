//! Dense-array math, seeded randomness, and gradient verification.
//!
//! Everything downstream (tokenizers, attention, the trainer) runs on
//! [`DenseArray`]. Arrays are row-major; the element type is a `Scalar`
//! so the same code runs in f64 for exact oracles and f32 for training.
//! All operations are pure: no global state, no interior mutability.

mod params;
mod rng;

pub use params::{finite_diff_check, GradCheckReport, ParamEntry, ParamStore};
pub use rng::{draw_normal, RngState};

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type for all arrays: f32 in training loops, f64 in oracles.
pub trait Scalar:
    Float + num_traits::NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}
impl<S> Scalar for S where
    S: Float + num_traits::NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

/// Converts an f64 literal into the active scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 literal must convert to scalar type")
}

/// Row-major dense array. Extents may be zero (empty token segments are legal).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "DenseArray::new",
                detail: format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// 2-D array from row vectors; all rows must have equal width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "DenseArray::from_rows",
                    detail: format!("row {} has width {}, expected {}", i, r.len(), cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D array.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a 2-D array.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.shape[1] + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "DenseArray::reshape",
                detail: format!("cannot view {} values as {:?}", self.data.len(), shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("scalar cast"))
                .collect(),
        }
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{ctx}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Copy of a contiguous row range of a 2-D array.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        let d = self.cols();
        let mut out = Self::zeros(&[range.len(), d]);
        for (i, r) in range.enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Stacks 2-D arrays of equal width on top of each other.
    pub fn vstack(parts: &[&DenseArray<T>]) -> Result<Self> {
        let width = parts
            .iter()
            .find(|p| p.rows() > 0)
            .map_or_else(|| parts.first().map_or(0, |p| p.cols()), |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rows() > 0 && p.cols() != width {
                return Err(Error::ShapeMismatch {
                    op: "DenseArray::vstack",
                    detail: format!("width {} != {}", p.cols(), width),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        DenseArray::new(vec![rows, width], data)
    }

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &DenseArray<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// self += alpha * other.
    pub fn add_scaled(&mut self, alpha: T, other: &DenseArray<T>) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }
}

// ---------------------------------------------------------------------------
// Kernels. `mm*` accumulate into `out`; callers zero-fill when they want a
// plain product. Summation order is fixed so results are reproducible.
// ---------------------------------------------------------------------------

/// out += a(m x k) . b(k x n)
pub(crate) fn mm_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// Dot product with four fixed accumulator lanes.
#[inline]
fn dot4<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let k = x.len();
    let chunks = k / 4 * 4;
    let (mut a0, mut a1, mut a2, mut a3) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut i = 0;
    while i < chunks {
        a0 += x[i] * y[i];
        a1 += x[i + 1] * y[i + 1];
        a2 += x[i + 2] * y[i + 2];
        a3 += x[i + 3] * y[i + 3];
        i += 4;
    }
    let mut s = (a0 + a1) + (a2 + a3);
    for r in chunks..k {
        s += x[r] * y[r];
    }
    s
}

/// out += a(m x k) . b(n x k)^T
pub(crate) fn mm_nt_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] += dot4(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out += a(k x m)^T . b(k x n)
pub(crate) fn mm_tn_acc<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aki * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// C[i][j] = sum_r A[i][r] * B[r][j].
pub fn matmul<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} . {:?}", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseArray::zeros(&[m, n]);
    mm_acc(&a.data, m, k, &b.data, n, &mut out.data);
    out.check_finite("matmul")?;
    Ok(out)
}

/// A . B^T without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("{:?} . {:?}^T", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = DenseArray::zeros(&[m, n]);
    mm_nt_acc(&a.data, m, k, &b.data, n, &mut out.data);
    out.check_finite("matmul_nt")?;
    Ok(out)
}

/// A^T . B without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            detail: format!("{:?}^T . {:?}", a.shape, b.shape),
        });
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseArray::zeros(&[m, n]);
    mm_tn_acc(&a.data, k, m, &b.data, n, &mut out.data);
    out.check_finite("matmul_tn")?;
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction. Total on finite input.
pub fn softmax_rows<T: Scalar>(x: &DenseArray<T>) -> DenseArray<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        softmax_row_inplace(out.row_mut(r));
    }
    out
}

#[inline]
pub(crate) fn softmax_row_inplace<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of softmax_rows: given probs P and dL/dP, returns dL/dlogits.
pub(crate) fn softmax_rows_backward<T: Scalar>(
    probs: &DenseArray<T>,
    dprobs: &DenseArray<T>,
) -> DenseArray<T> {
    let mut out = DenseArray::zeros(probs.shape());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let mut dot = T::zero();
        for (a, b) in p.iter().zip(dp) {
            dot += *a * *b;
        }
        let o = out.row_mut(r);
        for j in 0..p.len() {
            o[j] = p[j] * (dp[j] - dot);
        }
    }
    out
}

/// Per-row normalization to mean 0 / population variance 1, then affine.
pub fn layer_norm<T: Scalar>(
    x: &DenseArray<T>,
    gamma: &DenseArray<T>,
    beta: &DenseArray<T>,
    eps: f64,
) -> Result<DenseArray<T>> {
    let (y, _, _) = layer_norm_fwd(x, gamma, beta, eps)?;
    Ok(y)
}

/// Forward pass that also returns the normalized activations and per-row
/// reciprocal standard deviations needed by the backward pass.
pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &DenseArray<T>,
    gamma: &DenseArray<T>,
    beta: &DenseArray<T>,
    eps: f64,
) -> Result<(DenseArray<T>, DenseArray<T>, Vec<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("width {} vs gamma {} / beta {}", d, gamma.len(), beta.len()),
        });
    }
    if d == 0 {
        return Err(Error::contract("layer_norm requires width >= 1"));
    }
    let epst = lit::<T>(eps);
    let inv_d = T::one() / lit::<T>(d as f64);
    let mut y = DenseArray::zeros(x.shape());
    let mut xhat = DenseArray::zeros(x.shape());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let xi = x.row(r);
        let mut mean = T::zero();
        for &v in xi {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in xi {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::one() / (var + epst).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (xi[j] - mean) * rs;
        }
        let yo = y.row_mut(r);
        let xh = xhat.row(r);
        for j in 0..d {
            yo[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, xhat, rstd))
}

/// Backward of layer_norm. Returns dL/dx and accumulates dgamma/dbeta.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &DenseArray<T>,
    xhat: &DenseArray<T>,
    rstd: &[T],
    gamma: &DenseArray<T>,
    dgamma: &mut DenseArray<T>,
    dbeta: &mut DenseArray<T>,
) -> DenseArray<T> {
    let d = xhat.cols();
    let inv_d = T::one() / lit::<T>(d as f64);
    let mut dx = DenseArray::zeros(xhat.shape());
    for r in 0..xhat.rows() {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        {
            let dg = dgamma.data_mut();
            let db = dbeta.data_mut();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        let g = gamma.data();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] = rstd[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Column sums of a 2-D array (bias gradients).
pub(crate) fn col_sums<T: Scalar>(a: &DenseArray<T>) -> DenseArray<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = DenseArray::zeros(&[n]);
    for i in 0..m {
        let row = a.row(i);
        let o = out.data_mut();
        for j in 0..n {
            o[j] += row[j];
        }
    }
    out
}

/// y[i][j] = x[i][j] + bias[j].
pub(crate) fn add_bias_rows<T: Scalar>(x: &mut DenseArray<T>, bias: &DenseArray<T>) {
    let n = x.cols();
    debug_assert_eq!(bias.len(), n);
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for j in 0..n {
            row[j] += bias.data()[j];
        }
    }
}

/// Elementwise GELU, tanh approximation:
/// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu<T: Scalar>(x: &DenseArray<T>) -> DenseArray<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = lit::<T>(0.7978845608028654); // sqrt(2/pi)
    let c = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = lit::<T>(0.7978845608028654);
    let c = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

/// dL/dx for y = gelu(x).
pub(crate) fn gelu_backward<T: Scalar>(x: &DenseArray<T>, dy: &DenseArray<T>) -> DenseArray<T> {
    assert_eq!(x.shape(), dy.shape(), "gelu_backward shape mismatch");
    let mut dx = DenseArray::zeros(x.shape());
    for ((o, &xi), &d) in dx.data.iter_mut().zip(x.data()).zip(dy.data()) {
        *o = gelu_grad_scalar(xi) * d;
    }
    dx
}
