//! Row-major dense matrices and the numeric kernels shared by the taped
//! (training) and tape-free (inference) code paths.
//!
//! Both paths call the same per-row kernels so that a prefix processed in one
//! batch and the same prefix processed one position at a time go through an
//! identical sequence of floating-point operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn scalar(value: T) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm_into(self, false, rhs, false, T::zero(), &mut out);
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `out = op(a)·op(b) + beta·out`, where `op` optionally transposes.
pub fn gemm_into<T: Scalar>(
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
    beta: T,
    out: &mut Matrix<T>,
) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        beta,
        &mut out.data,
        n as isize,
        1,
    );
}

/// Row-wise `x·w + b`.
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&Matrix<T>>) -> Matrix<T> {
    let mut out = x.matmul(w);
    if let Some(b) = b {
        add_row_broadcast(&mut out, b);
    }
    out
}

pub fn add_row_broadcast<T: Scalar>(out: &mut Matrix<T>, bias: &Matrix<T>) {
    assert_eq!(bias.len(), out.cols, "bias width");
    for r in 0..out.rows {
        for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
}

/// Normalizes one row in place into `out`; returns `(mean, 1/std)`.
pub fn layer_norm_row<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], out: &mut [T]) -> (T, T) {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &Matrix<T>, beta: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        layer_norm_row(x.row(r), &gamma.data, &beta.data, out.row_mut(r));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Strided view over a run of key or value rows for one attention head.
#[derive(Clone, Copy)]
pub struct HeadRows<'a, T> {
    pub data: &'a [T],
    pub stride: usize,
    pub offset: usize,
}

impl<'a, T> HeadRows<'a, T> {
    #[inline]
    pub fn row(&self, j: usize, head_dim: usize) -> &'a [T] {
        let start = j * self.stride + self.offset;
        &self.data[start..start + head_dim]
    }
}

/// Single-query scaled dot-product attention over keys `0..n_keys`.
///
/// Writes the attention weights into `probs[..n_keys]` and the mixed value
/// vector into `out`.
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: HeadRows<'_, T>,
    values: HeadRows<'_, T>,
    n_keys: usize,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let hd = q.len();
    let mut max = T::neg_infinity();
    for (j, p) in probs.iter_mut().enumerate().take(n_keys) {
        let k = keys.row(j, hd);
        let mut s = T::zero();
        for d in 0..hd {
            s += q[d] * k[d];
        }
        let s = s * scale;
        *p = s;
        if s > max {
            max = s;
        }
    }
    let mut total = T::zero();
    for p in probs.iter_mut().take(n_keys) {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in probs.iter_mut().take(n_keys) {
        *p /= total;
    }
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for (j, &p) in probs.iter().enumerate().take(n_keys) {
        let v = values.row(j, hd);
        for d in 0..hd {
            out[d] += p * v[d];
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    max + s.ln()
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
