//! Accuracy and ranking metrics.
//!
//! Ranking is restricted to each user's test items. An item is relevant when
//! its true rating reaches a global percentile of all test ratings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::ratings::RatingMatrix;
use crate::report::relative_change;

fn relative_error(cells: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (truth, pred) in cells {
        num += (truth - pred) * (truth - pred);
        den += truth * truth;
    }
    if den == 0.0 {
        return Err(Error::Degenerate("relative error over all-zero ratings".into()));
    }
    Ok((num / den).sqrt())
}

/// `sqrt(sum (r - r~)^2) / sqrt(sum r^2)` over the observed entries.
pub fn rmse(r: &RatingMatrix, f: &FactorPair) -> Result<f64> {
    if f.n_users() != r.n_users() || f.n_items() != r.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "factors cover {}x{}, ratings are {}x{}",
            f.n_users(),
            f.n_items(),
            r.n_users(),
            r.n_items()
        )));
    }
    relative_error(r.entries().map(|e| (e.rating, f.predict_unchecked(e.user, e.item))))
}

/// The same ratio over held-out `(user, item, truth)` cells.
pub fn prmse(heldout: &[(usize, usize, f64)], f: &FactorPair) -> Result<f64> {
    let mut cells = Vec::with_capacity(heldout.len());
    for &(u, i, t) in heldout {
        cells.push((t, f.predict(u, i)?));
    }
    relative_error(cells.into_iter())
}

/// Linear-interpolated `q`-quantile (`q` in `[0, 1]`) of `ratings`.
pub fn relevance_threshold(ratings: &[f64], q: f64) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::Degenerate("no test ratings".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("percentile must lie in [0, 1], got {q}")));
    }
    let mut v = ratings.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Default relevance percentile.
pub const RELEVANCE_PERCENTILE: f64 = 0.95;

/// Test items grouped by user, with the relevance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSets {
    /// `(item, true rating)` per user, sorted by item.
    pub users: Vec<Vec<(usize, f64)>>,
    pub threshold: f64,
}

impl TestSets {
    pub fn new(n_users: usize, test: &[(usize, usize, f64)], percentile: f64) -> Result<Self> {
        let ratings: Vec<f64> = test.iter().map(|t| t.2).collect();
        let threshold = relevance_threshold(&ratings, percentile)?;
        Self::with_threshold(n_users, test, threshold)
    }

    pub fn with_threshold(n_users: usize, test: &[(usize, usize, f64)], threshold: f64) -> Result<Self> {
        let mut users = vec![Vec::new(); n_users];
        for &(u, i, r) in test {
            if u >= n_users {
                return Err(Error::IndexOutOfRange { index: u, len: n_users });
            }
            users[u].push((i, r));
        }
        for list in &mut users {
            list.sort_by_key(|e| e.0);
        }
        Ok(TestSets { users, threshold })
    }

    pub fn is_relevant(&self, rating: f64) -> bool {
        rating >= self.threshold
    }
}

/// Items of one user ordered by descending score, ties by item index.
fn ranked(items: &[(usize, f64)], user: usize, score: &impl Fn(usize, usize) -> f64) -> Vec<(usize, f64)> {
    let mut scored: Vec<(f64, usize, f64)> = items.iter().map(|&(i, r)| (score(user, i), i, r)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i, r)| (i, r)).collect()
}

/// Hit@k under an arbitrary scoring function.
pub fn hit_at_k_with(sets: &TestSets, k: usize, score: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let (mut hits, mut users) = (0usize, 0usize);
    for (u, items) in sets.users.iter().enumerate() {
        if !items.iter().any(|&(_, r)| sets.is_relevant(r)) {
            continue;
        }
        users += 1;
        if ranked(items, u, &score).iter().take(k).any(|&(_, r)| sets.is_relevant(r)) {
            hits += 1;
        }
    }
    if users == 0 {
        return Err(Error::Degenerate(format!(
            "no user among {} has a relevant test item (threshold {})",
            sets.users.len(),
            sets.threshold
        )));
    }
    Ok(hits as f64 / users as f64)
}

/// Share of users with a relevant test item whose top-k predicted test
/// items contain at least one relevant item.
pub fn hit_at_k(sets: &TestSets, f: &FactorPair, k: usize) -> Result<f64> {
    hit_at_k_with(sets, k, |u, i| f.predict_unchecked(u, i))
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(pos, g)| g / ((pos + 2) as f64).log2()).sum()
}

/// NDCG@k under an arbitrary scoring function. Gains are true ratings,
/// clamped at zero.
pub fn ndcg_at_k_with(sets: &TestSets, k: usize, score: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let (mut total, mut users) = (0.0, 0usize);
    for (u, items) in sets.users.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let mut ideal: Vec<f64> = items.iter().map(|&(_, r)| r.max(0.0)).collect();
        ideal.sort_by(|a, b| b.total_cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));
        if idcg <= 0.0 {
            continue;
        }
        let got = dcg(ranked(items, u, &score).into_iter().take(k).map(|(_, r)| r.max(0.0)));
        total += got / idcg;
        users += 1;
    }
    if users == 0 {
        return Err(Error::Degenerate("every user has zero ideal DCG".into()));
    }
    Ok(total / users as f64)
}

pub fn ndcg_at_k(sets: &TestSets, f: &FactorPair, k: usize) -> Result<f64> {
    ndcg_at_k_with(sets, k, |u, i| f.predict_unchecked(u, i))
}

/// Metrics of one fit, or their mean over replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub rmse: f64,
    pub prmse: Option<f64>,
    pub hit_at_k: f64,
    pub ndcg_at_k: f64,
    pub hit_k: usize,
    pub ndcg_k: usize,
    pub n_replications: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub hit_k: usize,
    pub ndcg_k: usize,
    pub percentile: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            hit_k: 5,
            ndcg_k: 10,
            percentile: RELEVANCE_PERCENTILE,
        }
    }
}

/// RMSE on `train`; Hit@k and NDCG@k on `test`; PRMSE on `heldout` truth
/// when given.
pub fn evaluate(
    train: &RatingMatrix,
    test: &[(usize, usize, f64)],
    heldout: Option<&[(usize, usize, f64)]>,
    f: &FactorPair,
    opts: EvalOptions,
) -> Result<EvalResult> {
    let sets = TestSets::new(f.n_users(), test, opts.percentile)?;
    Ok(EvalResult {
        rmse: rmse(train, f)?,
        prmse: heldout.map(|h| prmse(h, f)).transpose()?,
        hit_at_k: hit_at_k(&sets, f, opts.hit_k)?,
        ndcg_at_k: ndcg_at_k(&sets, f, opts.ndcg_k)?,
        hit_k: opts.hit_k,
        ndcg_k: opts.ndcg_k,
        n_replications: 1,
    })
}

/// Mean of replications. PRMSE is kept only if every replication has it.
pub fn aggregate(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Degenerate("nothing to aggregate".into()))?;
    let n = results.len() as f64;
    let mean = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let prmse = results
        .iter()
        .map(|r| r.prmse)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(EvalResult {
        rmse: mean(|r| r.rmse),
        prmse,
        hit_at_k: mean(|r| r.hit_at_k),
        ndcg_at_k: mean(|r| r.ndcg_at_k),
        hit_k: first.hit_k,
        ndcg_k: first.ndcg_k,
        n_replications: results.iter().map(|r| r.n_replications).sum(),
    })
}

/// Whether every step of `trace` is non-increasing up to `slack` relative.
pub fn is_non_increasing(trace: &[f64], slack: f64) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + slack * w[0].abs())
}

/// First (1-based) iteration whose relative change from the previous one is
/// below `tol`.
pub fn converged_at(trace: &[f64], tol: f64) -> Option<usize> {
    trace
        .windows(2)
        .position(|w| relative_change(w[0], w[1]) < tol)
        .map(|k| k + 2)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair(u: ndarray::Array2<f64>, m: ndarray::Array2<f64>) -> FactorPair {
        FactorPair::new(u, m).unwrap()
    }

    #[test]
    fn rmse_cases() {
        let r = RatingMatrix::new(1, 3, &[(0, 0, 1.0), (0, 1, 2.0), (0, 2, 2.0)]).unwrap();
        let f = pair(array![[1.0]], array![[1.0], [2.0], [0.0]]);
        assert!((rmse(&r, &f).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let zero = pair(array![[0.0]], array![[0.0], [0.0], [0.0]]);
        assert_eq!(rmse(&r, &zero).unwrap(), 1.0);
        let exact = pair(array![[1.0]], array![[1.0], [2.0], [2.0]]);
        assert_eq!(rmse(&r, &exact).unwrap(), 0.0);
        assert_eq!(prmse(&[(0, 0, 1.0), (0, 1, 2.0), (0, 2, 2.0)], &f).unwrap(), rmse(&r, &f).unwrap());
        let z = RatingMatrix::new(1, 1, &[(0, 0, 0.0)]).unwrap();
        assert!(rmse(&z, &pair(array![[1.0]], array![[1.0]])).is_err());
    }

    #[test]
    fn percentile_cases() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((relevance_threshold(&v, 0.95).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(relevance_threshold(&[3.0; 7], 0.95).unwrap(), 3.0);
        assert_eq!(relevance_threshold(&[2.5], 0.95).unwrap(), 2.5);
    }

    #[test]
    fn hit_reverse_order_misses() {
        // one user, ten items, truth 10..1, predictions reversed
        let test: Vec<_> = (0..10).map(|i| (0, i, 10.0 - i as f64)).collect();
        let sets = TestSets::with_threshold(1, &test, 10.0).unwrap();
        assert_eq!(hit_at_k_with(&sets, 5, |_, i| i as f64).unwrap(), 0.0);
        assert_eq!(hit_at_k_with(&sets, 10, |_, i| i as f64).unwrap(), 1.0);
        assert_eq!(hit_at_k_with(&sets, 5, |_, i| -(i as f64)).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_hand_fixture() {
        let test: Vec<_> = (0..5).map(|i| (0, i, 5.0 - i as f64)).collect();
        let sets = TestSets::with_threshold(1, &test, 5.0).unwrap();
        assert!((ndcg_at_k_with(&sets, 5, |_, i| -(i as f64)).unwrap() - 1.0).abs() < 1e-15);
        // predicted order: items 2, 0, 4, 1, 3 -> gains 3, 5, 1, 4, 2
        let order = [1.0, 3.0, 0.0, 4.0, 2.0];
        let score = |_: usize, i: usize| -order[i];
        let logs = [1.0, 1.584962500721156, 2.0, 2.321928094887362, 2.584962500721156];
        let dcg: f64 = [3.0, 5.0, 1.0, 4.0, 2.0].iter().zip(logs).map(|(g, l)| g / l).sum();
        let idcg: f64 = [5.0, 4.0, 3.0, 2.0, 1.0].iter().zip(logs).map(|(g, l)| g / l).sum();
        assert!((ndcg_at_k_with(&sets, 5, score).unwrap() - dcg / idcg).abs() < 1e-12);
        // k = 1 with best item predicted last
        assert!((ndcg_at_k_with(&sets, 1, |_, i| i as f64).unwrap() - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn no_relevant_users_is_an_error() {
        let sets = TestSets::with_threshold(2, &[(0, 0, 1.0)], 5.0).unwrap();
        assert!(hit_at_k_with(&sets, 1, |_, _| 0.0).is_err());
        let zeros = TestSets::with_threshold(1, &[(0, 0, 0.0)], 0.0).unwrap();
        assert!(ndcg_at_k_with(&zeros, 1, |_, _| 0.0).is_err());
    }

    #[test]
    fn trace_helpers() {
        assert!(is_non_increasing(&[3.0, 2.0, 2.0, 1.0], 0.0));
        assert!(!is_non_increasing(&[3.0, 3.1], 1e-12));
        assert_eq!(converged_at(&[10.0, 5.0, 4.99], 0.01), Some(3));
        assert_eq!(converged_at(&[10.0], 0.01), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    }
}
