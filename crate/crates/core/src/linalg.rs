//! Small dense kernels shared by the solvers: Gram accumulation over row
//! subsets, SPD and general `p x p` solves with a single jitter retry, and
//! power-iteration spectral norms.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayBase, ArrayView2, Axis, Data, Ix2};

use crate::error::{Error, Result};

/// Relative diagonal jitter added once when a factorization fails.
pub const JITTER_SCALE: f64 = 1e-10;

/// Power iteration stops once the eigenvalue estimate moves by less than this
/// (relative).
pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITERS: usize = 200;

/// Read-only access to a set of equally sized rows.
pub trait RowSource {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn row(&self, k: usize) -> &[f64];
}

/// Rows `idx[k]` of a row-major matrix, without copying.
#[derive(Clone, Copy)]
pub struct IndexedRows<'a> {
    data: &'a [f64],
    cols: usize,
    idx: &'a [u32],
}

impl<'a> IndexedRows<'a> {
    /// `base` must be in standard (row-major, contiguous) layout.
    pub fn new<S: Data<Elem = f64>>(base: &'a ArrayBase<S, Ix2>, idx: &'a [u32]) -> Self {
        let data = base
            .as_slice()
            .expect("factor matrices are stored contiguous row-major");
        IndexedRows {
            data,
            cols: base.ncols(),
            idx,
        }
    }

    pub fn indices(&self) -> &'a [u32] {
        self.idx
    }
}

impl RowSource for IndexedRows<'_> {
    fn n_rows(&self) -> usize {
        self.idx.len()
    }

    fn n_cols(&self) -> usize {
        self.cols
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        let r = self.idx[k] as usize;
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All rows of a dense matrix view in standard layout.
pub struct DenseRows<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> DenseRows<'a> {
    pub fn new(view: &'a ArrayView2<'a, f64>) -> Self {
        let data = view
            .as_slice()
            .expect("dense slices are passed in standard layout");
        DenseRows {
            data,
            rows: view.nrows(),
            cols: view.ncols(),
        }
    }
}

impl RowSource for DenseRows<'_> {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn n_cols(&self) -> usize {
        self.cols
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }
}

/// Copies rows `idx` of `x` in order.
pub fn slice_rows(x: &Array2<f64>, idx: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= x.nrows()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: x.nrows(),
        });
    }
    Ok(x.select(Axis(0), idx))
}

/// Accumulates `sum_k w_k x_k x_k^T` and `sum_k w_k y_k x_k` over the given
/// rows, returning the full symmetric `p x p` Gram (row-major) and the
/// right-hand side. Only the upper triangle is accumulated, then mirrored.
pub fn weighted_gram<'a, I>(p: usize, rows: I) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = (&'a [f64], f64, f64)>,
{
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for (x, w, y) in rows {
        debug_assert_eq!(x.len(), p);
        for a in 0..p {
            let wa = w * x[a];
            rhs[a] += wa * y;
            let g = &mut gram[a * p + a..a * p + p];
            for (gb, xb) in g.iter_mut().zip(&x[a..]) {
                *gb += wa * xb;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
    }
    (gram, rhs)
}

pub fn add_diagonal(gram: &mut [f64], p: usize, value: f64) {
    for a in 0..p {
        gram[a * p + a] += value;
    }
}

fn trace(m: &[f64], p: usize) -> f64 {
    (0..p).map(|a| m[a * p + a]).sum()
}

fn try_cholesky(system: &[f64], rhs: &[f64], p: usize) -> Option<Vec<f64>> {
    let a = DMatrix::from_row_slice(p, p, system);
    let chol = a.cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}

fn try_lu(system: &[f64], rhs: &[f64], p: usize) -> Option<Vec<f64>> {
    let a = DMatrix::from_row_slice(p, p, system);
    let x = a.lu().solve(&DVector::from_column_slice(rhs))?;
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}

/// Solves the symmetric positive-definite system by Cholesky. On failure the
/// diagonal gets `1e-10 * trace / p` added once before giving up.
pub fn solve_spd(mut system: Vec<f64>, rhs: &[f64], p: usize, context: &str) -> Result<Vec<f64>> {
    if let Some(x) = try_cholesky(&system, rhs, p) {
        return Ok(x);
    }
    let jitter = JITTER_SCALE * trace(&system, p).abs() / p as f64;
    if jitter > 0.0 {
        add_diagonal(&mut system, p, jitter);
        if let Some(x) = try_cholesky(&system, rhs, p) {
            return Ok(x);
        }
    }
    Err(Error::Singular {
        context: context.to_string(),
    })
}

/// General (LU with partial pivoting) solve with the same single jitter retry.
pub fn solve_general(mut system: Vec<f64>, rhs: &[f64], p: usize, context: &str) -> Result<Vec<f64>> {
    if let Some(x) = try_lu(&system, rhs, p) {
        return Ok(x);
    }
    let jitter = JITTER_SCALE * trace(&system, p).abs() / p as f64;
    if jitter > 0.0 {
        add_diagonal(&mut system, p, jitter);
        if let Some(x) = try_lu(&system, rhs, p) {
            return Ok(x);
        }
    }
    Err(Error::Singular {
        context: context.to_string(),
    })
}

/// Result of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric positive semi-definite `p x p` matrix.
pub fn top_eigenvalue_psd(b: &[f64], p: usize) -> NormEstimate {
    if p == 0 {
        return NormEstimate {
            value: 0.0,
            converged: true,
        };
    }
    let mut v: Vec<f64> = (0..p).map(|k| 1.0 + 0.1 * ((k + 1) as f64).sin()).collect();
    normalize(&mut v);
    let mut w = vec![0.0; p];
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        for a in 0..p {
            w[a] = b[a * p..(a + 1) * p].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let rayleigh: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return NormEstimate {
                value: 0.0,
                converged: true,
            };
        }
        let done = (rayleigh - estimate).abs() <= POWER_TOL * rayleigh.abs();
        estimate = rayleigh;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if done {
            return NormEstimate {
                value: estimate.max(0.0),
                converged: true,
            };
        }
    }
    NormEstimate {
        value: estimate.max(0.0),
        converged: false,
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Spectral norm of a row-major `rows x cols` matrix, via power iteration on
/// the smaller of `A^T A` and `A A^T`.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> NormEstimate {
    let (b, p) = if cols <= rows {
        let mut b = vec![0.0; cols * cols];
        for r in 0..rows {
            let x = &a[r * cols..(r + 1) * cols];
            for i in 0..cols {
                for j in 0..cols {
                    b[i * cols + j] += x[i] * x[j];
                }
            }
        }
        (b, cols)
    } else {
        let mut b = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                b[i * rows + j] = (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum();
            }
        }
        (b, rows)
    };
    let e = top_eigenvalue_psd(&b, p);
    NormEstimate {
        value: e.value.sqrt(),
        converged: e.converged,
    }
}

/// Row-major matrix product `a (m x k) * b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *o += ail * bv;
            }
        }
    }
    out
}

/// Inverse of an SPD matrix (row-major), `None` if not positive definite.
pub fn spd_inverse(m: &[f64], p: usize) -> Option<Vec<f64>> {
    let chol = DMatrix::from_row_slice(p, p, m).cholesky()?;
    let inv = chol.inverse();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            out[i * p + j] = inv[(i, j)];
        }
    }
    Some(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
