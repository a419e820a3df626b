//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn extend_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// A row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols)
            .map(|_| F::lit(normal.sample(rng)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Adds `row` to every row of the `m × row.len()` matrix `x`.
pub fn add_row<F: Scalar>(x: &mut [F], row: &[F]) {
    for chunk in x.chunks_mut(row.len()) {
        for (v, &b) in chunk.iter_mut().zip(row) {
            *v += b;
        }
    }
}

/// Column sums of an `m × n` matrix accumulated into `out`.
pub fn col_sum_acc<F: Scalar>(x: &[F], n: usize, out: &mut [F]) {
    for chunk in x.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut out: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = out.iter().copied().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Log-softmax of one row, computed in f64 regardless of the storage type.
pub fn log_softmax_f64<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|z| z.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|z| (z.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|z| z.as_f64() - lse).collect()
}

/// Cached statistics of a layer norm over the rows of a matrix.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm<F: Scalar>(
    x: &[F],
    dim: usize,
    gain: &[F],
    bias: &[F],
) -> (Vec<F>, LayerNormCache<F>) {
    let rows = x.len() / dim;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstds = Vec::with_capacity(rows);
    let n = F::lit(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + F::lit(LN_EPS)).sqrt();
        rstds.push(rstd);
        for j in 0..dim {
            let xh = (row[j] - mean) * rstd;
            xhat[r * dim + j] = xh;
            out[r * dim + j] = xh * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd: rstds })
}

/// Backpropagates through a layer norm; returns the input gradient and, when
/// requested, accumulates gain and bias gradients.
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    dim: usize,
    gain: &[F],
    cache: &LayerNormCache<F>,
    mut param_grads: Option<(&mut [F], &mut [F])>,
) -> Vec<F> {
    let rows = dy.len() / dim;
    let mut dx = vec![F::zero(); dy.len()];
    let n = F::lit(dim as f64);
    let mut dxhat = vec![F::zero(); dim];
    for r in 0..rows {
        let dy_row = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        if let Some((dg, db)) = param_grads.as_mut() {
            for j in 0..dim {
                dg[j] += dy_row[j] * xh[j];
                db[j] += dy_row[j];
            }
        }
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for j in 0..dim {
            dxhat[j] = dy_row[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= n;
        mean_dx /= n;
        let rstd = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] = rstd * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}
