//! Regularized alternating least squares.
//!
//! Minimizes
//!
//! ```text
//! f(U, M) = sum_{(i,j) observed} (r_ij - u_i m_j^T)^2
//!         + lambda * (sum_i n_i |u_i|^2 + sum_j n_j |m_j|^2)
//! ```
//!
//! where `n_i`, `n_j` are the per-user and per-item rating counts. Each
//! half-iteration solves one ridge regression per row with the other factor
//! held fixed. The sweep loop here is shared by every estimator; the
//! estimators differ only in how a single row regression is solved.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{InitScheme, Method, SolverConfig};
use crate::diagnostics::{DiagnosticsRecord, Side};
use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::linalg::{add_diagonal, solve_spd, weighted_gram, IndexedRows, RowSource};
use crate::ratings::RatingMatrix;
use crate::report::{relative_change, DiagnosticsRow, FitReport};

/// Regularized objective of `factors` on the observed entries of `r`.
pub fn objective(r: &RatingMatrix, factors: &FactorPair, lambda: f64) -> Result<f64> {
    check_dims(r, factors)?;
    Ok(objective_parts(r, factors, lambda).0)
}

fn check_dims(r: &RatingMatrix, factors: &FactorPair) -> Result<()> {
    if factors.n_users() != r.n_users() || factors.n_items() != r.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "factors are {}x{} (users x items) but ratings are {}x{}",
            factors.n_users(),
            factors.n_items(),
            r.n_users(),
            r.n_items()
        )));
    }
    Ok(())
}

/// Returns (objective, residual sum of squares, sum of squared ratings).
/// Summation is sequential in row-major order so results are reproducible.
fn objective_parts(r: &RatingMatrix, f: &FactorPair, lambda: f64) -> (f64, f64, f64) {
    let mut rss = 0.0;
    let mut total = 0.0;
    let mut penalty = 0.0;
    for u in 0..r.n_users() {
        let (items, vals) = r.user_ratings(u);
        if items.is_empty() {
            continue;
        }
        let urow = f.users.row(u);
        for (&i, &v) in items.iter().zip(vals) {
            let e = v - urow.dot(&f.items.row(i as usize));
            rss += e * e;
            total += v * v;
        }
        penalty += items.len() as f64 * urow.dot(&urow);
    }
    for i in 0..r.n_items() {
        let n = r.item_count(i);
        if n > 0 {
            let m = f.items.row(i);
            penalty += n as f64 * m.dot(&m);
        }
    }
    (rss + lambda * penalty, rss, total)
}

/// Solves `(X^T X + lambda n E) u = X^T y` for the rows of `x`.
pub(crate) fn solve_full_rows<S: RowSource>(
    x: &S,
    y: &[f64],
    lambda: f64,
    count: usize,
    context: &str,
) -> Result<Vec<f64>> {
    let p = x.n_cols();
    let (mut gram, rhs) = weighted_gram(p, (0..x.n_rows()).map(|k| (x.row(k), 1.0, y[k])));
    add_diagonal(&mut gram, p, lambda * count as f64);
    solve_spd(gram, &rhs, p, context)
}

/// Exact update of user `user` with item factors held fixed. `None` when the
/// user has no ratings (the row should be left as is).
pub fn update_user_full(
    items: &Array2<f64>,
    r: &RatingMatrix,
    user: usize,
    lambda: f64,
) -> Result<Option<Array1<f64>>> {
    if user >= r.n_users() {
        return Err(Error::IndexOutOfRange {
            index: user,
            len: r.n_users(),
        });
    }
    let (idx, y) = r.user_ratings(user);
    update_full_lane(items, r.n_items(), idx, y, lambda, &format!("user {user}"))
}

/// Exact update of item `item` with user factors held fixed.
pub fn update_item_full(
    users: &Array2<f64>,
    r: &RatingMatrix,
    item: usize,
    lambda: f64,
) -> Result<Option<Array1<f64>>> {
    if item >= r.n_items() {
        return Err(Error::IndexOutOfRange {
            index: item,
            len: r.n_items(),
        });
    }
    let (idx, y) = r.item_ratings(item);
    update_full_lane(users, r.n_users(), idx, y, lambda, &format!("item {item}"))
}

fn update_full_lane(
    fixed: &Array2<f64>,
    expected_rows: usize,
    idx: &[u32],
    y: &[f64],
    lambda: f64,
    context: &str,
) -> Result<Option<Array1<f64>>> {
    if fixed.nrows() != expected_rows {
        return Err(Error::DimensionMismatch(format!(
            "fixed factor has {} rows, expected {expected_rows}",
            fixed.nrows()
        )));
    }
    if idx.is_empty() {
        return Ok(None);
    }
    let fixed = fixed.as_standard_layout();
    let rows = IndexedRows::new(&fixed, idx);
    solve_full_rows(&rows, y, lambda, idx.len(), context).map(|v| Some(Array1::from(v)))
}

/// Dispatches on `cfg.method`.
pub fn fit(r: &RatingMatrix, cfg: &SolverConfig) -> Result<(FactorPair, FitReport)> {
    match cfg.method {
        Method::Full => run(r, cfg, &FullUpdater),
        Method::Core => crate::core_als::fit_core(r, cfg),
        Method::FastCore => crate::core_als::fit_fast_core(r, cfg),
        Method::Unif | Method::Blev => crate::baselines::fit_sampled(r, cfg),
    }
}

/// Everything a row regression needs.
pub(crate) struct RowTask<'a> {
    pub fixed: &'a Array2<f64>,
    pub indices: &'a [u32],
    pub ratings: &'a [f64],
    pub side: Side,
    pub iteration: usize,
    pub index: usize,
    pub lambda: f64,
}

impl RowTask<'_> {
    pub fn rows(&self) -> IndexedRows<'_> {
        IndexedRows::new(self.fixed, self.indices)
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn context(&self, method: Method) -> String {
        format!(
            "{} {} at iteration {} ({method})",
            self.side.name(),
            self.index,
            self.iteration + 1
        )
    }
}

#[derive(Default)]
pub(crate) struct RowOutcome {
    pub row: Vec<f64>,
    pub sketch_nanos: u64,
    pub solve_nanos: u64,
    pub diagnostics: Option<DiagnosticsRecord>,
}

/// One estimator plugged into the sweep loop.
pub(crate) trait RowUpdater: Sync {
    type Prepared: Sync;

    fn method(&self) -> Method;

    /// Runs once per half-iteration before the rows are solved.
    fn prepare(&self, fixed: &Array2<f64>, side: Side, iteration: usize) -> Result<Self::Prepared>;

    fn solve(&self, prepared: &Self::Prepared, task: &RowTask<'_>) -> Result<RowOutcome>;
}

pub(crate) struct FullUpdater;

impl RowUpdater for FullUpdater {
    type Prepared = ();

    fn method(&self) -> Method {
        Method::Full
    }

    fn prepare(&self, _: &Array2<f64>, _: Side, _: usize) -> Result<()> {
        Ok(())
    }

    fn solve(&self, _: &(), task: &RowTask<'_>) -> Result<RowOutcome> {
        let t0 = Instant::now();
        let row = solve_full_rows(
            &task.rows(),
            task.ratings,
            task.lambda,
            task.count(),
            &task.context(Method::Full),
        )?;
        Ok(RowOutcome {
            row,
            solve_nanos: t0.elapsed().as_nanos() as u64,
            ..Default::default()
        })
    }
}

/// Item factors i.i.d. uniform on `[0, 1/sqrt(rank))`.
pub fn initial_items(n_items: usize, rank: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = 1.0 / (rank as f64).sqrt();
    Array2::from_shape_fn((n_items, rank), |_| rng.random_range(0.0..hi))
}

/// Runs the alternating sweeps with the given row estimator.
pub(crate) fn run<U: RowUpdater>(
    r: &RatingMatrix,
    cfg: &SolverConfig,
    updater: &U,
) -> Result<(FactorPair, FitReport)> {
    cfg.validate()?;
    if r.nnz() == 0 {
        return Err(Error::EmptyTrainingSet("rating matrix has no entries".into()));
    }
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(|| run_loop(r, cfg, updater))
        }
        None => run_loop(r, cfg, updater),
    }
}

fn run_loop<U: RowUpdater>(
    r: &RatingMatrix,
    cfg: &SolverConfig,
    updater: &U,
) -> Result<(FactorPair, FitReport)> {
    let start = Instant::now();
    let rank = cfg.rank;
    let items = match &cfg.init {
        InitScheme::Uniform => initial_items(r.n_items(), rank, cfg.seed),
        InitScheme::Given(m) => {
            if m.dim() != (r.n_items(), rank) {
                return Err(Error::DimensionMismatch(format!(
                    "initial item factors are {:?}, expected ({}, {rank})",
                    m.dim(),
                    r.n_items()
                )));
            }
            m.as_standard_layout().into_owned()
        }
    };
    let users = Array2::zeros((r.n_users(), rank));
    let mut factors = FactorPair { users, items };
    let mut report = FitReport::new(updater.method());

    let user_counts = r.user_counts();
    let item_counts = r.item_counts();
    report.skipped_users = user_counts.iter().filter(|&&c| c == 0).count();
    report.skipped_items = item_counts.iter().filter(|&&c| c == 0).count();
    if report.skipped_users + report.skipped_items > 0 {
        report.warnings.push(format!(
            "{} users and {} items have no training ratings and keep their initial factors",
            report.skipped_users, report.skipped_items
        ));
    }
    let min_count = user_counts.iter().chain(&item_counts).filter(|&&c| c > 0).min();
    if let Some(&m) = min_count {
        if rank > m {
            report.warnings.push(format!(
                "rank {rank} exceeds the smallest rating count {m}; relying on lambda for regularization"
            ));
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }

    let mut sketch_nanos = 0u64;
    let mut solve_nanos = 0u64;
    let mut objective_secs = 0.0;
    for t in 0..cfg.max_iters {
        for side in [Side::Users, Side::Items] {
            let (fixed, target, n) = match side {
                Side::Users => (&factors.items, &mut factors.users, r.n_users()),
                Side::Items => (&factors.users, &mut factors.items, r.n_items()),
            };
            let t_prep = Instant::now();
            let prepared = updater.prepare(fixed, side, t)?;
            sketch_nanos += t_prep.elapsed().as_nanos() as u64;

            let outcomes: Vec<Result<Option<RowOutcome>>> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let (indices, ratings) = match side {
                        Side::Users => r.user_ratings(k),
                        Side::Items => r.item_ratings(k),
                    };
                    if indices.is_empty() {
                        return Ok(None);
                    }
                    let task = RowTask {
                        fixed,
                        indices,
                        ratings,
                        side,
                        iteration: t,
                        index: k,
                        lambda: cfg.lambda,
                    };
                    updater.solve(&prepared, &task).map(Some)
                })
                .collect();
            for (k, outcome) in outcomes.into_iter().enumerate() {
                let Some(out) = outcome? else { continue };
                if out.row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Singular {
                        context: format!("{} {k} at iteration {} produced non-finite factors", side.name(), t + 1),
                    });
                }
                target.row_mut(k).assign(&Array1::from(out.row));
                sketch_nanos += out.sketch_nanos;
                solve_nanos += out.solve_nanos;
                if let Some(record) = out.diagnostics {
                    report.diagnostics.push(DiagnosticsRow {
                        iteration: t + 1,
                        side,
                        index: k,
                        record,
                    });
                }
            }
        }

        let t_obj = Instant::now();
        let (obj, rss, total) = objective_parts(r, &factors, cfg.lambda);
        objective_secs += t_obj.elapsed().as_secs_f64();
        let rmse = if total > 0.0 { (rss / total).sqrt() } else { 0.0 };
        let previous = report.objective_trace.last().copied();
        report.objective_trace.push(obj);
        report.rmse_trace.push(rmse);
        report.iters_run = t + 1;
        if let Some(prev) = previous {
            if relative_change(prev, obj) < cfg.tol {
                report.converged = true;
                break;
            }
        }
    }

    report.timings.total_secs = start.elapsed().as_secs_f64();
    report.timings.sketch_secs = sketch_nanos as f64 * 1e-9;
    report.timings.solve_secs = solve_nanos as f64 * 1e-9;
    report.timings.objective_secs = objective_secs;
    Ok((factors, report))
}
