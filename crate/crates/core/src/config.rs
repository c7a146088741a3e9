use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which estimator each per-row regression uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exact regularized ALS.
    Full,
    /// Core-elements sketch of every regression slice.
    Core,
    /// Core-elements sketch of the whole factor matrix once per half-iteration.
    FastCore,
    /// Uniform row subsampling.
    Unif,
    /// Leverage-score row subsampling.
    Blev,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Full, Method::Core, Method::FastCore, Method::Unif, Method::Blev];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Core => "core",
            Method::FastCore => "fast_core",
            Method::Unif => "unif",
            Method::Blev => "blev",
        }
    }

    pub fn subsamples(self) -> bool {
        self != Method::Full
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "als" => Ok(Method::Full),
            "core" => Ok(Method::Core),
            "fast_core" | "fast" => Ok(Method::FastCore),
            "unif" | "uniform" => Ok(Method::Unif),
            "blev" | "leverage" => Ok(Method::Blev),
            _ => Err(Error::config(format!("unknown method {s:?}"))),
        }
    }
}

/// How the item factors are initialized. User factors come from the first
/// user sweep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. uniform on `[0, 1/sqrt(rank))`, seeded.
    #[default]
    Uniform,
    /// Caller-provided item factors (`n_items x rank`).
    #[serde(skip)]
    Given(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub rank: usize,
    pub lambda: f64,
    /// Subsampling rate in `(0, 1]`; ignored by `Full`.
    pub rate: f64,
    pub max_iters: usize,
    /// Threshold on the relative objective change between iterations.
    pub tol: f64,
    pub seed: u64,
    pub init: InitScheme,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Record per-regression approximation diagnostics (core methods only).
    pub diagnostics: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Full,
            rank: 10,
            lambda: 0.1,
            rate: 1.0,
            max_iters: 50,
            tol: 0.01,
            seed: 0,
            init: InitScheme::Uniform,
            threads: None,
            diagnostics: false,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, rank: usize, lambda: f64) -> Self {
        SolverConfig {
            method,
            rank,
            lambda,
            ..Default::default()
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.diagnostics = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        validate_rate(self.rate)?;
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }
}

pub fn validate_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("subsampling rate must lie in (0, 1], got {rate}")))
    }
}

/// `max(1, floor(n * rate))`, capped at `n`. A few ulps of slack absorb
/// representation error such as `0.29 * 100 = 28.999999999999996`.
pub fn retained_count(n: usize, rate: f64) -> usize {
    let s = (n as f64 * rate * (1.0 + 8.0 * f64::EPSILON)).floor() as usize;
    s.clamp(1, n.max(1))
}
