//! Synthetic benchmark data: correlated latent factors, Gaussian noise and a
//! uniformly random observation mask of exact size.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::ratings::RatingMatrix;

/// Row distribution of the latent factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorDist {
    /// Multivariate normal (D1).
    Normal,
    /// Elementwise exp of a multivariate normal draw (D2).
    Lognormal,
    /// Multivariate t with 4 degrees of freedom (D3).
    T4,
}

impl FactorDist {
    pub const ALL: [FactorDist; 3] = [FactorDist::Normal, FactorDist::Lognormal, FactorDist::T4];

    pub fn name(self) -> &'static str {
        match self {
            FactorDist::Normal => "normal",
            FactorDist::Lognormal => "lognormal",
            FactorDist::T4 => "t4",
        }
    }
}

impl fmt::Display for FactorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FactorDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "d1" => Ok(FactorDist::Normal),
            "lognormal" | "d2" => Ok(FactorDist::Lognormal),
            "t4" | "t" | "d3" => Ok(FactorDist::T4),
            _ => Err(Error::config(format!("unknown factor distribution {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dist: FactorDist,
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    /// AR(1) correlation between latent coordinates.
    pub rho: f64,
    /// Fraction of cells observed.
    pub alpha: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dist: FactorDist::Normal,
            n_users: 100,
            n_items: 100,
            rank: 10,
            rho: 0.6,
            alpha: 0.4,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(dist: FactorDist, n_users: usize, n_items: usize, rank: usize, alpha: f64) -> Self {
        SyntheticConfig {
            dist,
            n_users,
            n_items,
            rank,
            alpha,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise_sd(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.rank == 0 {
            return Err(Error::config("n_users, n_items and rank must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    /// Number of observed cells, `round(alpha * n_users * n_items)`.
    pub fn observed_count(&self) -> usize {
        (self.alpha * (self.n_users * self.n_items) as f64).round() as usize
    }
}

/// `Sigma_ij = rho^|i - j|`.
pub fn ar1_covariance(p: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((p, p), |(i, j)| rho.powi(i.abs_diff(j) as i32))
}

fn cholesky_factor(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    let sigma = ar1_covariance(p, rho);
    let m = DMatrix::from_fn(p, p, |i, j| sigma[[i, j]]);
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Degenerate(format!("AR(1) covariance with rho={rho} is not positive definite")))
}

fn draw_rows(n: usize, l: &DMatrix<f64>, dist: FactorDist, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let p = l.nrows();
    let chi = ChiSquared::new(4.0).expect("valid degrees of freedom");
    let mut out = Array2::zeros((n, p));
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let scale = match dist {
            FactorDist::T4 => (4.0 / Distribution::<f64>::sample(&chi, rng)).sqrt(),
            _ => 1.0,
        };
        for a in 0..p {
            let mut s = 0.0;
            for b in 0..=a {
                s += l[(a, b)] * z[b];
            }
            out[[i, a]] = match dist {
                FactorDist::Normal => s,
                FactorDist::Lognormal => s.exp(),
                FactorDist::T4 => s * scale,
            };
        }
    }
    out
}

/// Draws `U` (`n_users x rank`) then `M` (`n_items x rank`) with i.i.d. rows.
pub fn sample_factors(cfg: &SyntheticConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let l = cholesky_factor(cfg.rank, cfg.rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = draw_rows(cfg.n_users, &l, cfg.dist, &mut rng);
    let m = draw_rows(cfg.n_items, &l, cfg.dist, &mut rng);
    Ok((u, m))
}

/// A generated instance.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Noisy observed entries.
    pub ratings: RatingMatrix,
    /// Noiseless `U M^T`.
    pub truth: Array2<f64>,
    pub factors: FactorPair,
    /// Empty rows/columns that were filled by moving an observation.
    pub repaired: usize,
    /// Empty rows/columns left empty because no observation could be moved.
    pub unresolved: usize,
}

impl SyntheticData {
    /// Ground truth on every unobserved cell.
    pub fn heldout_truth(&self) -> Vec<(usize, usize, f64)> {
        let (nu, nm) = self.truth.dim();
        let mut out = Vec::with_capacity(nu * nm - self.ratings.nnz());
        for i in 0..nu {
            let (items, _) = self.ratings.user_ratings(i);
            let mut next = items.iter().peekable();
            for j in 0..nm {
                if next.peek().is_some_and(|&&k| k as usize == j) {
                    next.next();
                    continue;
                }
                out.push((i, j, self.truth[[i, j]]));
            }
        }
        out
    }
}

struct Mask {
    cells: Vec<bool>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    nm: usize,
}

impl Mask {
    fn set(&mut self, cell: usize, on: bool) {
        if self.cells[cell] != on {
            self.cells[cell] = on;
            let (i, j) = (cell / self.nm, cell % self.nm);
            if on {
                self.rows[i] += 1;
                self.cols[j] += 1;
            } else {
                self.rows[i] -= 1;
                self.cols[j] -= 1;
            }
        }
    }

    /// An observed cell whose row and column both keep another observation,
    /// scanning from a random start.
    fn donor(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        let n = self.cells.len();
        let start = rng.random_range(0..n);
        (0..n).map(|k| (start + k) % n).find(|&c| {
            self.cells[c] && self.rows[c / self.nm] >= 2 && self.cols[c % self.nm] >= 2
        })
    }
}

/// Fills empty rows and columns by moving one observation each, keeping the
/// total count. Returns (repaired, unresolved).
fn repair(mask: &mut Mask, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let nu = mask.rows.len();
    let nm = mask.nm;
    let (mut repaired, mut unresolved) = (0, 0);
    for i in 0..nu {
        if mask.rows[i] > 0 {
            continue;
        }
        let Some(d) = mask.donor(rng) else {
            unresolved += 1;
            continue;
        };
        mask.set(d, false);
        mask.set(i * nm + rng.random_range(0..nm), true);
        repaired += 1;
    }
    for j in 0..nm {
        if mask.cols[j] > 0 {
            continue;
        }
        let Some(d) = mask.donor(rng) else {
            unresolved += 1;
            continue;
        };
        mask.set(d, false);
        mask.set(rng.random_range(0..nu) * nm + j, true);
        repaired += 1;
    }
    (repaired, unresolved)
}

/// Samples factors, forms `U M^T`, adds noise to every cell and keeps
/// exactly `round(alpha * n_users * n_items)` uniformly chosen cells.
pub fn generate_rating_matrix(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (u, m) = sample_factors(cfg)?;
    let truth = u.dot(&m.t());
    let (nu, nm) = (cfg.n_users, cfg.n_items);
    let total = nu * nm;
    let k = cfg.observed_count();
    if k == 0 {
        return Err(Error::config(format!("alpha={} leaves no observed cells", cfg.alpha)));
    }
    // separate stream from the factors so changing alpha keeps U and M
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::config(format!("noise: {e}")))?;
    let noisy: Vec<f64> = truth.iter().map(|&t| t + noise.sample(&mut rng)).collect();

    let mut mask = Mask {
        cells: vec![false; total],
        rows: vec![0; nu],
        cols: vec![0; nm],
        nm,
    };
    for c in index::sample(&mut rng, total, k) {
        mask.set(c, true);
    }
    let (repaired, unresolved) = repair(&mut mask, &mut rng);
    if repaired + unresolved > 0 {
        log::warn!("synthetic mask: {repaired} empty rows/columns repaired, {unresolved} left empty");
    }

    let entries: Vec<(usize, usize, f64)> = (0..total)
        .filter(|&c| mask.cells[c])
        .map(|c| (c / nm, c % nm, noisy[c]))
        .collect();
    let ratings = RatingMatrix::new(nu, nm, &entries)?;
    Ok(SyntheticData {
        ratings,
        truth,
        factors: FactorPair::new(u, m)?,
        repaired,
        unresolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_cases() {
        assert_eq!(ar1_covariance(3, 0.0), Array2::<f64>::eye(3));
        let s = ar1_covariance(2, 0.6);
        assert_eq!(s, ndarray::array![[1.0, 0.6], [0.6, 1.0]]);
    }

    #[test]
    fn exact_density() {
        let cfg = SyntheticConfig::new(FactorDist::Normal, 100, 100, 5, 0.4).with_seed(3);
        let d = generate_rating_matrix(&cfg).unwrap();
        assert_eq!(d.ratings.nnz(), 4000);
        assert_eq!(d.unresolved, 0);
    }

    #[test]
    fn noiseless_full_equals_product() {
        let cfg = SyntheticConfig::new(FactorDist::T4, 6, 7, 3, 1.0).with_noise_sd(0.0);
        let d = generate_rating_matrix(&cfg).unwrap();
        assert_eq!(d.ratings.nnz(), 42);
        for e in d.ratings.entries() {
            assert_eq!(e.rating, d.truth[[e.user, e.item]]);
        }
        assert!(d.heldout_truth().is_empty());
    }

    #[test]
    fn lognormal_is_positive() {
        let cfg = SyntheticConfig::new(FactorDist::Lognormal, 50, 40, 4, 0.5);
        let (u, m) = sample_factors(&cfg).unwrap();
        assert!(u.iter().chain(m.iter()).all(|&v| v > 0.0));
    }

    #[test]
    fn sparse_mask_is_repaired() {
        let cfg = SyntheticConfig::new(FactorDist::Normal, 30, 30, 2, 0.05).with_seed(1);
        let d = generate_rating_matrix(&cfg).unwrap();
        assert_eq!(d.ratings.nnz(), 45);
        assert!(d.ratings.user_counts().iter().all(|&c| c > 0));
        assert!(d.ratings.item_counts().iter().all(|&c| c > 0));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SyntheticConfig::new(FactorDist::Normal, 5, 5, 2, 0.0).validate().is_err());
        assert!(SyntheticConfig::default().with_rho(1.0).validate().is_err());
        assert!(SyntheticConfig::default().with_noise_sd(-1.0).validate().is_err());
    }
}
