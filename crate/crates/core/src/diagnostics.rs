//! Per-regression approximation diagnostics for the core estimator.
//!
//! For a regression with slice `X`, sketch `X*`, response `y`, penalty
//! `lambda * n`, exact solution `u_full` and core solution `u_core`:
//!
//! * `spectral_ratio = |X - X*|_2 / |X|_2`
//! * `c_const = |X|_2^2 * |(X^T X + lambda n E)^-1|_2`
//! * `rsse = |y - X u_full| / |y|`
//! * `rss_ratio = |y - X u_core|^2 / |y - X u_full|^2`
//! * `gamma = |D L^T X|_2` with `L = X - X*`, `D = (X^T X + lambda n E)^-1`
//!
//! Spectral norms come from power iteration; an estimate that hit the
//! iteration cap is flagged through `converged`, not treated as an error.

use ndarray::ArrayView2;
use serde::Serialize;

use crate::ces::SparseSketch;
use crate::error::{Error, Result};
use crate::linalg::{add_diagonal, matmul, spd_inverse, spectral_norm, top_eigenvalue_psd, weighted_gram};

/// Which factor a half-iteration updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Users,
    Items,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Users => "user",
            Side::Items => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub spectral_ratio: f64,
    pub c_const: f64,
    pub rsse: f64,
    pub rss_ratio: f64,
    pub gamma: f64,
    /// All power iterations met their tolerance.
    pub converged: bool,
}

impl DiagnosticsRecord {
    /// Largest admissible `spectral_ratio` for a `(1 + eps)` residual
    /// guarantee, given this instance's `c_const` and `rsse`:
    ///
    /// `(1/c) * [1 + (c + 1) / ((sqrt(1 + eps) - 1) * rsse)]^-1`
    pub fn admissible_ratio(&self, eps: f64) -> f64 {
        admissible_ratio(self.c_const, self.rsse, eps)
    }

    /// Whether the measured sketch error satisfies the bound for `eps`.
    pub fn certificate_applies(&self, eps: f64) -> bool {
        self.spectral_ratio <= self.admissible_ratio(eps)
    }

    /// Element-wise mean and max over a group of records.
    pub fn mean_max(records: &[DiagnosticsRecord]) -> (DiagnosticsRecord, DiagnosticsRecord) {
        let n = records.len().max(1) as f64;
        let fields = |r: &DiagnosticsRecord| [r.spectral_ratio, r.c_const, r.rsse, r.rss_ratio, r.gamma];
        let mut sum = [0.0; 5];
        let mut max = [0.0f64; 5];
        for r in records {
            for (k, v) in fields(r).into_iter().enumerate() {
                sum[k] += v;
                max[k] = max[k].max(v);
            }
        }
        let converged = records.iter().all(|r| r.converged);
        let build = |a: [f64; 5]| DiagnosticsRecord {
            spectral_ratio: a[0],
            c_const: a[1],
            rsse: a[2],
            rss_ratio: a[3],
            gamma: a[4],
            converged,
        };
        (build(sum.map(|v| v / n)), build(max))
    }
}

pub fn admissible_ratio(c_const: f64, rsse: f64, eps: f64) -> f64 {
    if c_const <= 0.0 {
        return f64::INFINITY;
    }
    let slack = (1.0 + eps).sqrt() - 1.0;
    let denom = slack * rsse;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 / c_const) / (1.0 + (c_const + 1.0) / denom)
}

fn residual_sq(x: &[f64], n: usize, p: usize, y: &[f64], u: &[f64]) -> f64 {
    (0..n)
        .map(|k| {
            let fit: f64 = x[k * p..(k + 1) * p].iter().zip(u).map(|(a, b)| a * b).sum();
            (y[k] - fit).powi(2)
        })
        .sum()
}

/// Fills a [`DiagnosticsRecord`] for one regression instance.
pub fn compute_diagnostics(
    x: &ArrayView2<f64>,
    sketch: &SparseSketch,
    y: &[f64],
    lambda: f64,
    count: usize,
    u_full: &[f64],
    u_core: &[f64],
) -> Result<DiagnosticsRecord> {
    let (n, p) = x.dim();
    if sketch.n_rows() != n || sketch.n_cols() != p || y.len() != n || u_full.len() != p || u_core.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "diagnostics inputs disagree: slice {n}x{p}, sketch {}x{}, y {}, u {} / {}",
            sketch.n_rows(),
            sketch.n_cols(),
            y.len(),
            u_full.len(),
            u_core.len()
        )));
    }
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().expect("standard layout");
    let mut lmat = xd.to_vec();
    for c in 0..p {
        let (rows, _) = sketch.column(c);
        for &r in rows {
            lmat[r as usize * p + c] = 0.0;
        }
    }

    let x_norm = spectral_norm(xd, n, p);
    let l_norm = spectral_norm(&lmat, n, p);
    let spectral_ratio = if x_norm.value > 0.0 {
        l_norm.value / x_norm.value
    } else {
        0.0
    };

    let (mut system, _) = weighted_gram(p, (0..n).map(|k| (&xd[k * p..(k + 1) * p], 1.0, 0.0)));
    add_diagonal(&mut system, p, lambda * count as f64);
    let d = spd_inverse(&system, p).ok_or_else(|| Error::Singular {
        context: "diagnostics: X^T X + lambda n E".into(),
    })?;
    let d_norm = top_eigenvalue_psd(&d, p);
    let c_const = x_norm.value * x_norm.value * d_norm.value;

    // D L^T X, all p x p
    let mut ltx = vec![0.0; p * p];
    for k in 0..n {
        let lrow = &lmat[k * p..(k + 1) * p];
        let xrow = &xd[k * p..(k + 1) * p];
        for a in 0..p {
            if lrow[a] == 0.0 {
                continue;
            }
            for b in 0..p {
                ltx[a * p + b] += lrow[a] * xrow[b];
            }
        }
    }
    let dltx = matmul(&d, &ltx, p, p, p);
    let gamma = spectral_norm(&dltx, p, p);

    let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rss_full = residual_sq(xd, n, p, y, u_full);
    let rss_core = residual_sq(xd, n, p, y, u_core);
    let rsse = if y_norm > 0.0 { rss_full.sqrt() / y_norm } else { 0.0 };
    let rss_ratio = if rss_full > 0.0 {
        rss_core / rss_full
    } else if rss_core == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };

    Ok(DiagnosticsRecord {
        spectral_ratio,
        c_const,
        rsse,
        rss_ratio,
        gamma: gamma.value,
        converged: x_norm.converged && l_norm.converged && d_norm.converged && gamma.converged,
    })
}
