//! Core-ALS: each row regression replaces one factor of the Gram product by
//! its core-elements sketch,
//!
//! ```text
//! u~ = (X*^T X + lambda n E)^-1 X*^T y
//! ```
//!
//! The sketched Gram is not symmetric, so the system goes through a general
//! LU solve. When a sketch keeps every entry the update takes the exact
//! Cholesky path instead, so rate 1 reproduces plain ALS bit for bit.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};

use crate::als::{run, solve_full_rows, RowOutcome, RowTask, RowUpdater};
use crate::ces::{sketch_products, sketch_rows, SparseSketch};
use crate::config::{Method, SolverConfig};
use crate::diagnostics::{compute_diagnostics, DiagnosticsRecord, Side};
use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::linalg::{add_diagonal, solve_general, DenseRows, RowSource};
use crate::ratings::RatingMatrix;
use crate::report::FitReport;

fn solve_core<S: RowSource>(x: &S, sketch: &SparseSketch, y: &[f64], lambda: f64, count: usize, context: &str) -> Result<Vec<f64>> {
    if sketch.is_complete() {
        return solve_full_rows(x, y, lambda, count, context);
    }
    let p = x.n_cols();
    let (mut gram, rhs) = sketch_products(sketch, x, y);
    add_diagonal(&mut gram, p, lambda * count as f64);
    solve_general(gram, &rhs, p, context)
}

fn check_slice(x: &ArrayView2<f64>, sketch: &SparseSketch, y: &[f64]) -> Result<()> {
    if x.dim() != (sketch.n_rows(), sketch.n_cols()) || y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "slice {:?}, sketch {}x{}, {} ratings",
            x.dim(),
            sketch.n_rows(),
            sketch.n_cols(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Degenerate("empty regression slice".into()));
    }
    Ok(())
}

/// Core update of one user from the rated item slice `m_slice`, its sketch
/// and the user's ratings. `count` is the user's rating count.
pub fn update_user_core(
    m_slice: &ArrayView2<f64>,
    sketch: &SparseSketch,
    y: &[f64],
    lambda: f64,
    count: usize,
) -> Result<Array1<f64>> {
    check_slice(m_slice, sketch, y)?;
    let x = m_slice.as_standard_layout();
    let view = x.view();
    solve_core(&DenseRows::new(&view), sketch, y, lambda, count, "user core update").map(Array1::from)
}

/// Core update of one item from the slice of users who rated it.
pub fn update_item_core(
    u_slice: &ArrayView2<f64>,
    sketch: &SparseSketch,
    y: &[f64],
    lambda: f64,
    count: usize,
) -> Result<Array1<f64>> {
    check_slice(u_slice, sketch, y)?;
    let x = u_slice.as_standard_layout();
    let view = x.view();
    solve_core(&DenseRows::new(&view), sketch, y, lambda, count, "item core update").map(Array1::from)
}

fn dense_slice<S: RowSource>(x: &S) -> Array2<f64> {
    let (n, p) = (x.n_rows(), x.n_cols());
    let mut out = Array2::zeros((n, p));
    for k in 0..n {
        out.row_mut(k).assign(&ndarray::ArrayView1::from(x.row(k)));
    }
    out
}

fn diagnose(task: &RowTask<'_>, sketch: &SparseSketch, u_core: &[f64], context: &str) -> Result<DiagnosticsRecord> {
    let rows = task.rows();
    let u_full = solve_full_rows(&rows, task.ratings, task.lambda, task.count(), context)?;
    let x = dense_slice(&rows);
    compute_diagnostics(&x.view(), sketch, task.ratings, task.lambda, task.count(), &u_full, u_core)
}

fn finish(task: &RowTask<'_>, sketch: SparseSketch, method: Method, diagnostics: bool, sketch_nanos: u64) -> Result<RowOutcome> {
    let context = task.context(method);
    let t0 = Instant::now();
    let row = solve_core(&task.rows(), &sketch, task.ratings, task.lambda, task.count(), &context)?;
    let solve_nanos = t0.elapsed().as_nanos() as u64;
    let diagnostics = if diagnostics {
        Some(diagnose(task, &sketch, &row, &context)?)
    } else {
        None
    };
    Ok(RowOutcome {
        row,
        sketch_nanos,
        solve_nanos,
        diagnostics,
    })
}

/// Sketches every regression slice separately.
pub(crate) struct CoreUpdater {
    pub rate: f64,
    pub diagnostics: bool,
}

impl RowUpdater for CoreUpdater {
    type Prepared = ();

    fn method(&self) -> Method {
        Method::Core
    }

    fn prepare(&self, _: &Array2<f64>, _: Side, _: usize) -> Result<()> {
        Ok(())
    }

    fn solve(&self, _: &(), task: &RowTask<'_>) -> Result<RowOutcome> {
        let t0 = Instant::now();
        let sketch = sketch_rows(&task.rows(), self.rate);
        let sketch_nanos = t0.elapsed().as_nanos() as u64;
        finish(task, sketch, Method::Core, self.diagnostics, sketch_nanos)
    }
}

/// Retention mask of a whole-matrix sketch, row-major like the factor.
pub(crate) struct WholeSketch {
    // bit c of keep[g * words + c / 64]: entry (g, c) is retained
    keep: Vec<u64>,
    words: usize,
    p: usize,
}

impl WholeSketch {
    fn build(fixed: &Array2<f64>, rate: f64) -> Self {
        let view = fixed.view();
        let sk = sketch_rows(&DenseRows::new(&view), rate);
        let p = fixed.ncols();
        let words = p.div_ceil(64);
        let mut keep = vec![0u64; fixed.nrows() * words];
        for c in 0..p {
            for &r in sk.column(c).0 {
                keep[r as usize * words + c / 64] |= 1 << (c % 64);
            }
        }
        WholeSketch { keep, words, p }
    }

    fn for_each_kept(&self, g: usize, mut f: impl FnMut(usize)) {
        for (i, &word) in self.keep[g * self.words..(g + 1) * self.words].iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                f(i * 64 + bits.trailing_zeros() as usize);
                bits &= bits - 1;
            }
        }
    }

    /// Restriction of the mask to the rows in `indices`. A column that keeps
    /// nothing falls back to the slice's largest-magnitude entry.
    fn slice(&self, fixed: &Array2<f64>, indices: &[u32]) -> SparseSketch {
        let p = self.p;
        let mut counts = vec![0usize; p];
        for &g in indices {
            self.for_each_kept(g as usize, |c| counts[c] += 1);
        }
        let mut fallback = vec![None; p];
        if !indices.is_empty() {
            for c in 0..p {
                if counts[c] > 0 {
                    continue;
                }
                let mut best = 0;
                for (k, &g) in indices.iter().enumerate() {
                    if fixed[[g as usize, c]].abs() > fixed[[indices[best] as usize, c]].abs() {
                        best = k;
                    }
                }
                fallback[c] = Some(best);
                counts[c] = 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(p + 1);
        col_ptr.push(0);
        for &n in &counts {
            col_ptr.push(col_ptr.last().unwrap() + n);
        }
        let nnz = col_ptr[p];
        let mut rows = vec![0u32; nnz];
        let mut values = vec![0.0; nnz];
        let mut cursor = col_ptr[..p].to_vec();
        for (c, best) in fallback.iter().enumerate() {
            if let Some(k) = *best {
                rows[cursor[c]] = k as u32;
                values[cursor[c]] = fixed[[indices[k] as usize, c]];
            }
        }
        for (k, &g) in indices.iter().enumerate() {
            let row = fixed.row(g as usize);
            self.for_each_kept(g as usize, |c| {
                rows[cursor[c]] = k as u32;
                values[cursor[c]] = row[c];
                cursor[c] += 1;
            });
        }
        SparseSketch::from_parts(indices.len(), col_ptr, rows, values)
    }
}

/// Sketches the whole fixed factor once per half-iteration and restricts
/// the mask to each regression slice.
pub(crate) struct FastCoreUpdater {
    pub rate: f64,
    pub diagnostics: bool,
}

impl RowUpdater for FastCoreUpdater {
    type Prepared = WholeSketch;

    fn method(&self) -> Method {
        Method::FastCore
    }

    fn prepare(&self, fixed: &Array2<f64>, _: Side, _: usize) -> Result<WholeSketch> {
        Ok(WholeSketch::build(fixed, self.rate))
    }

    fn solve(&self, whole: &WholeSketch, task: &RowTask<'_>) -> Result<RowOutcome> {
        let t0 = Instant::now();
        let sketch = whole.slice(task.fixed, task.indices);
        let sketch_nanos = t0.elapsed().as_nanos() as u64;
        finish(task, sketch, Method::FastCore, self.diagnostics, sketch_nanos)
    }
}

/// Core-ALS with a fresh sketch of every regression slice.
pub fn fit_core(r: &RatingMatrix, cfg: &SolverConfig) -> Result<(FactorPair, FitReport)> {
    run(
        r,
        cfg,
        &CoreUpdater {
            rate: cfg.rate,
            diagnostics: cfg.diagnostics,
        },
    )
}

/// Core-ALS with one whole-matrix sketch per half-iteration. Per-slice
/// budgets are not exact; each column of the whole matrix keeps
/// `max(1, floor(n * rate))` entries.
pub fn fit_fast_core(r: &RatingMatrix, cfg: &SolverConfig) -> Result<(FactorPair, FitReport)> {
    run(
        r,
        cfg,
        &FastCoreUpdater {
            rate: cfg.rate,
            diagnostics: cfg.diagnostics,
        },
    )
}
