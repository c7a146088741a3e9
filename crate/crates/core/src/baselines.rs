//! Row-subsampling baselines for the per-row regressions: uniform sampling
//! without replacement (UNIF) and leverage-score sampling with replacement
//! (BLEV). Sampled rows are reweighted by `1 / (s p_i)` and the ridge
//! penalty keeps the full rating count.

use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::als::{run, RowOutcome, RowTask, RowUpdater};
use crate::config::{retained_count, validate_rate, Method, SolverConfig};
use crate::diagnostics::Side;
use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::linalg::{add_diagonal, solve_spd, weighted_gram, DenseRows, RowSource};
use crate::ratings::RatingMatrix;
use crate::report::FitReport;

/// Rows drawn from one regression slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSample {
    /// Selected slice rows, with multiplicity for sampling with replacement.
    pub indices: Vec<usize>,
    /// Sampling probability of every slice row.
    pub probabilities: Vec<f64>,
    /// `1 / (s p_i)` for each entry of `indices`.
    pub weights: Vec<f64>,
}

impl RowSample {
    /// Every row once with unit weight.
    pub fn full(n: usize) -> Self {
        RowSample {
            indices: (0..n).collect(),
            probabilities: vec![1.0 / n as f64; n],
            weights: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn sample_size(n: usize, rate: f64, min_rows: usize) -> usize {
    retained_count(n, rate).max(min_rows).min(n)
}

/// `max(min_rows, floor(n * rate))` distinct rows (capped at `n`), uniform
/// without replacement. Indices are returned sorted.
pub fn sample_uniform(n: usize, rate: f64, min_rows: usize, seed: u64) -> Result<RowSample> {
    validate_rate(rate)?;
    if n == 0 {
        return Err(Error::Degenerate("cannot sample from an empty slice".into()));
    }
    let s = sample_size(n, rate, min_rows);
    if s == n {
        return Ok(RowSample::full(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, s).into_vec();
    indices.sort_unstable();
    let w = n as f64 / s as f64;
    Ok(RowSample {
        weights: vec![w; s],
        indices,
        probabilities: vec![1.0 / n as f64; n],
    })
}

/// Leverage scores of a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Leverage {
    /// `h_i`, squared row norms of an orthonormal basis of the column space.
    pub scores: Vec<f64>,
    /// Numerical column rank; the scores sum to it.
    pub rank: usize,
    /// Set when the basis came from a rank-revealing fallback.
    pub rank_deficient: bool,
}

impl Leverage {
    /// `h_i / rank`, a distribution over the rows.
    pub fn probabilities(&self) -> Vec<f64> {
        let r = self.rank.max(1) as f64;
        self.scores.iter().map(|h| h / r).collect()
    }
}

/// Leverage scores via a thin QR factorization; slices that are wide or
/// numerically rank deficient go through the SVD instead.
pub fn leverage_scores(x: &ArrayView2<f64>) -> Result<Leverage> {
    let (n, p) = x.dim();
    if n == 0 || p == 0 {
        return Err(Error::Degenerate(format!("leverage scores of a {n}x{p} slice")));
    }
    let m = DMatrix::from_fn(n, p, |i, j| x[[i, j]]);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(Leverage {
            scores: vec![0.0; n],
            rank: 0,
            rank_deficient: true,
        });
    }
    if n >= p {
        let qr = m.clone().qr();
        let r = qr.r();
        let rmax = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
        let tol = rmax * n.max(p) as f64 * f64::EPSILON * 10.0;
        if (0..p).all(|k| r[(k, k)].abs() > tol) {
            let q = qr.q();
            let scores = (0..n).map(|i| q.row(i).norm_squared()).collect();
            return Ok(Leverage {
                scores,
                rank: p,
                rank_deficient: false,
            });
        }
    }
    let svd = m.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let tol = smax * n.max(p) as f64 * f64::EPSILON * 10.0;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > tol)
        .collect();
    let scores = (0..n)
        .map(|i| keep.iter().map(|&k| u[(i, k)] * u[(i, k)]).sum())
        .collect();
    Ok(Leverage {
        scores,
        rank: keep.len(),
        rank_deficient: keep.len() < p,
    })
}

/// `s` rows drawn with replacement from `probabilities`.
pub fn sample_leverage(probabilities: &[f64], s: usize, seed: u64) -> Result<RowSample> {
    let dist = WeightedIndex::new(probabilities)
        .map_err(|e| Error::Degenerate(format!("leverage distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..s).map(|_| dist.sample(&mut rng)).collect();
    indices.sort_unstable();
    let weights = indices.iter().map(|&i| 1.0 / (s as f64 * probabilities[i])).collect();
    Ok(RowSample {
        indices,
        probabilities: probabilities.to_vec(),
        weights,
    })
}

fn solve_sampled<S: RowSource>(x: &S, y: &[f64], sample: &RowSample, lambda: f64, count: usize, context: &str) -> Result<Vec<f64>> {
    let p = x.n_cols();
    let (mut gram, rhs) = weighted_gram(
        p,
        sample
            .indices
            .iter()
            .zip(&sample.weights)
            .map(|(&k, &w)| (x.row(k), w, y[k])),
    );
    add_diagonal(&mut gram, p, lambda * count as f64);
    solve_spd(gram, &rhs, p, context)
}

/// Weighted ridge regression on the sampled rows of a slice,
/// `(sum_k w_k x_k x_k^T + lambda n E)^-1 sum_k w_k y_k x_k`.
pub fn update_row_sampled(
    x: &ArrayView2<f64>,
    y: &[f64],
    sample: &RowSample,
    lambda: f64,
    count: usize,
) -> Result<Array1<f64>> {
    if y.len() != x.nrows() || sample.indices.len() != sample.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "slice {:?} with {} ratings, {} sampled rows with {} weights",
            x.dim(),
            y.len(),
            sample.indices.len(),
            sample.weights.len()
        )));
    }
    if sample.is_empty() {
        return Err(Error::Degenerate("row sample is empty".into()));
    }
    if let Some(&bad) = sample.indices.iter().find(|&&k| k >= x.nrows()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: x.nrows(),
        });
    }
    let x = x.as_standard_layout();
    let view = x.view();
    solve_sampled(&DenseRows::new(&view), y, sample, lambda, count, "sampled update").map(Array1::from)
}

/// Per-row stream seed from the run seed and the row's position in the loop.
fn row_seed(seed: u64, iteration: usize, side: Side, index: usize) -> u64 {
    let mut z = seed
        ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ if side == Side::Items { 0xA24B_AED4_963E_E407 } else { 0 };
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) struct SampledUpdater {
    pub method: Method,
    pub rate: f64,
    pub seed: u64,
}

impl SampledUpdater {
    fn draw(&self, task: &RowTask<'_>) -> Result<RowSample> {
        let n = task.count();
        let p = task.fixed.ncols();
        let seed = row_seed(self.seed, task.iteration, task.side, task.index);
        if self.rate >= 1.0 {
            return Ok(RowSample::full(n));
        }
        match self.method {
            Method::Blev => {
                let rows = task.rows();
                let slice = Array2::from_shape_fn((n, p), |(k, c)| rows.row(k)[c]);
                let lev = leverage_scores(&slice.view())?;
                if lev.rank == 0 {
                    return sample_uniform(n, self.rate, p, seed);
                }
                sample_leverage(&lev.probabilities(), sample_size(n, self.rate, p).max(1), seed)
            }
            _ => sample_uniform(n, self.rate, p, seed),
        }
    }
}

impl RowUpdater for SampledUpdater {
    type Prepared = ();

    fn method(&self) -> Method {
        self.method
    }

    fn prepare(&self, _: &Array2<f64>, _: Side, _: usize) -> Result<()> {
        Ok(())
    }

    fn solve(&self, _: &(), task: &RowTask<'_>) -> Result<RowOutcome> {
        let t0 = Instant::now();
        let sample = self.draw(task)?;
        let sketch_nanos = t0.elapsed().as_nanos() as u64;
        let t1 = Instant::now();
        let row = solve_sampled(
            &task.rows(),
            task.ratings,
            &sample,
            task.lambda,
            task.count(),
            &task.context(self.method),
        )?;
        Ok(RowOutcome {
            row,
            sketch_nanos,
            solve_nanos: t1.elapsed().as_nanos() as u64,
            diagnostics: None,
        })
    }
}

/// ALS with UNIF or BLEV row sampling in every regression.
pub fn fit_sampled(r: &RatingMatrix, cfg: &SolverConfig) -> Result<(FactorPair, FitReport)> {
    if !matches!(cfg.method, Method::Unif | Method::Blev) {
        return Err(Error::config(format!("fit_sampled needs unif or blev, got {}", cfg.method)));
    }
    run(
        r,
        cfg,
        &SampledUpdater {
            method: cfg.method,
            rate: cfg.rate,
            seed: cfg.seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_counts_and_determinism() {
        let a = sample_uniform(10, 0.3, 1, 5).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(a.indices.iter().all(|&i| i < 10));
        assert_eq!(a, sample_uniform(10, 0.3, 1, 5).unwrap());
        assert_eq!(sample_uniform(10, 0.1, 4, 5).unwrap().len(), 4);
        assert_eq!(sample_uniform(3, 0.1, 4, 5).unwrap(), RowSample::full(3));
    }

    #[test]
    fn uniform_rate_one_is_full() {
        let s = sample_uniform(7, 1.0, 1, 0).unwrap();
        assert_eq!(s, RowSample::full(7));
    }

    #[test]
    fn leverage_of_identity_and_single_row() {
        let lev = leverage_scores(&Array2::eye(3).view()).unwrap();
        assert!(lev.scores.iter().all(|h| (h - 1.0).abs() < 1e-12));
        let x = array![[1.0], [0.0], [0.0]];
        let lev = leverage_scores(&x.view()).unwrap();
        assert!((lev.scores[0] - 1.0).abs() < 1e-12);
        assert!(lev.scores[1].abs() < 1e-12 && lev.scores[2].abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_flagged() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0]];
        let lev = leverage_scores(&x.view()).unwrap();
        assert!(lev.rank_deficient);
        assert_eq!(lev.rank, 1);
        assert!((lev.scores.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let p: f64 = lev.probabilities().iter().sum();
        assert!((p - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_row_scalar_ridge() {
        let x = array![[2.0], [5.0]];
        let sample = RowSample {
            indices: vec![1],
            probabilities: vec![0.5, 0.5],
            weights: vec![1.0],
        };
        let u = update_row_sampled(&x.view(), &[0.0, 3.0], &sample, 0.5, 2).unwrap();
        assert!((u[0] - 5.0 * 3.0 / (25.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn leverage_sampling_weights() {
        let probs = [0.5, 0.25, 0.25];
        let s = sample_leverage(&probs, 4, 2).unwrap();
        assert_eq!(s.len(), 4);
        for (&i, &w) in s.indices.iter().zip(&s.weights) {
            assert!((w - 1.0 / (4.0 * probs[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn row_seeds_differ() {
        let a = row_seed(1, 0, Side::Users, 3);
        assert_ne!(a, row_seed(1, 0, Side::Items, 3));
        assert_ne!(a, row_seed(1, 1, Side::Users, 3));
        assert_ne!(a, row_seed(1, 0, Side::Users, 4));
    }
}
