//! Benchmark sweeps over methods, rates and data settings.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svg::{line_chart, Series};
use crate::config::{Method, SolverConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalOptions, EvalResult};
use crate::ratings::split_holdout;
use crate::synth::{generate_rating_matrix, FactorDist, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub methods: Vec<Method>,
    pub rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub ranks: Vec<usize>,
    pub dists: Vec<FactorDist>,
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub rho: f64,
    pub noise_sd: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Fraction of observed entries held out for the ranking metrics.
    pub test_fraction: f64,
    pub hit_k: usize,
    pub ndcg_k: usize,
    pub percentile: f64,
    /// Run and discard one fit per cell before timing.
    pub warmup: bool,
    /// Run cells concurrently; timings are then not comparable.
    pub parallel: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            methods: vec![Method::Full, Method::Core, Method::Unif, Method::Blev],
            rates: vec![0.1, 0.15, 0.2, 0.25],
            lambdas: vec![0.1],
            ranks: vec![10],
            dists: vec![FactorDist::Normal],
            alphas: vec![0.4],
            replications: 1,
            seed: 0,
            n_users: 200,
            n_items: 200,
            rho: 0.6,
            noise_sd: 1.0,
            max_iters: 50,
            tol: 0.01,
            test_fraction: 0.2,
            hit_k: 5,
            ndcg_k: 10,
            percentile: metrics::RELEVANCE_PERCENTILE,
            warmup: true,
            parallel: false,
            threads: None,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("methods", self.methods.is_empty()),
            ("rates", self.rates.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("ranks", self.ranks.is_empty()),
            ("dists", self.dists.is_empty()),
            ("alphas", self.alphas.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|e| e.1) {
            return Err(Error::config(format!("grid list {name} is empty")));
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        for &r in &self.rates {
            crate::config::validate_rate(r)?;
        }
        Ok(())
    }

    fn data_settings(&self) -> Vec<DataSetting> {
        let mut out = Vec::new();
        for &dist in &self.dists {
            for &alpha in &self.alphas {
                for &rank in &self.ranks {
                    for &lambda in &self.lambdas {
                        out.push(DataSetting { dist, alpha, rank, lambda });
                    }
                }
            }
        }
        out
    }

    /// `(method, rate)` pairs; `Full` appears once at rate 1.
    fn solver_cells(&self) -> Vec<(Method, f64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::Full {
                out.push((m, 1.0));
            } else {
                out.extend(self.rates.iter().map(|&r| (m, r)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DataSetting {
    dist: FactorDist,
    alpha: f64,
    rank: usize,
    lambda: f64,
}

/// One fit on one replication.
#[derive(Debug, Clone, Serialize)]
pub struct RepResult {
    pub method: Method,
    pub rate: f64,
    pub lambda: f64,
    pub rank: usize,
    pub dist: FactorDist,
    pub alpha: f64,
    pub seed: u64,
    pub eval: Option<EvalResult>,
    pub iters: usize,
    pub converged: bool,
    pub fit_secs: f64,
    pub error: Option<String>,
}

/// Mean over replications of one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub method: Method,
    pub rate: f64,
    pub lambda: f64,
    pub rank: usize,
    pub dist: FactorDist,
    pub alpha: f64,
    pub seed: u64,
    pub eval: Option<EvalResult>,
    pub mean_iters: f64,
    pub converged_share: f64,
    pub mean_secs: f64,
    pub median_secs: f64,
    pub errors: Vec<String>,
}

fn run_cell(
    grid: &ExperimentGrid,
    data: &Prepared,
    s: DataSetting,
    method: Method,
    rate: f64,
    seed: u64,
) -> RepResult {
    let cfg = SolverConfig {
        method,
        rank: s.rank,
        lambda: s.lambda,
        rate,
        max_iters: grid.max_iters,
        tol: grid.tol,
        seed,
        threads: grid.threads,
        ..Default::default()
    };
    let t0 = Instant::now();
    let fitted = crate::als::fit(&data.train, &cfg);
    let fit_secs = t0.elapsed().as_secs_f64();
    let opts = EvalOptions {
        hit_k: grid.hit_k,
        ndcg_k: grid.ndcg_k,
        percentile: grid.percentile,
    };
    let mut out = RepResult {
        method,
        rate,
        lambda: s.lambda,
        rank: s.rank,
        dist: s.dist,
        alpha: s.alpha,
        seed,
        eval: None,
        iters: 0,
        converged: false,
        fit_secs,
        error: None,
    };
    match fitted.and_then(|(f, rep)| {
        metrics::evaluate(&data.train, &data.test, Some(&data.heldout), &f, opts).map(|e| (e, rep))
    }) {
        Ok((e, rep)) => {
            out.eval = Some(e);
            out.iters = rep.iters_run;
            out.converged = rep.converged;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

struct Prepared {
    train: crate::ratings::RatingMatrix,
    test: Vec<(usize, usize, f64)>,
    heldout: Vec<(usize, usize, f64)>,
}

fn prepare(grid: &ExperimentGrid, s: DataSetting, seed: u64) -> Result<Prepared> {
    let cfg = SyntheticConfig {
        dist: s.dist,
        n_users: grid.n_users,
        n_items: grid.n_items,
        rank: s.rank,
        rho: grid.rho,
        alpha: s.alpha,
        noise_sd: grid.noise_sd,
        seed,
    };
    let data = generate_rating_matrix(&cfg)?;
    let split = split_holdout(&data.ratings, grid.test_fraction, seed)?;
    // every cell outside the training set, scored against the noiseless truth
    let mut heldout = data.heldout_truth();
    heldout.extend(split.test.iter().map(|&(u, i, _)| (u, i, data.truth[[u, i]])));
    heldout.sort_by_key(|a| (a.0, a.1));
    Ok(Prepared {
        train: split.train,
        test: split.test,
        heldout,
    })
}

/// Runs every cell of the grid. Replication `k` uses seed `seed + k` for
/// data, split and solver alike.
pub fn run_grid(grid: &ExperimentGrid) -> Result<(Vec<RepResult>, Vec<CellSummary>)> {
    grid.validate()?;
    let cells = grid.solver_cells();
    let mut reps = Vec::new();
    for s in grid.data_settings() {
        let seeds: Vec<u64> = (0..grid.replications as u64).map(|k| grid.seed.wrapping_add(k)).collect();
        let mut prepared = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            prepared.push(prepare(grid, s, seed)?);
        }
        if grid.warmup && !grid.parallel {
            for &(m, r) in &cells {
                let _ = run_cell(grid, &prepared[0], s, m, r, seeds[0]);
            }
        }
        let jobs: Vec<(usize, Method, f64)> = cells
            .iter()
            .flat_map(|&(m, r)| (0..seeds.len()).map(move |k| (k, m, r)))
            .collect();
        let run = |&(k, m, r): &(usize, Method, f64)| run_cell(grid, &prepared[k], s, m, r, seeds[k]);
        let results: Vec<RepResult> = if grid.parallel {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        reps.extend(results);
    }
    let summaries = summarize(&reps, grid.seed);
    Ok((reps, summaries))
}

fn summarize(reps: &[RepResult], base_seed: u64) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    let mut start = 0;
    while start < reps.len() {
        let head = &reps[start];
        let same = |r: &RepResult| {
            r.method == head.method
                && r.rate == head.rate
                && r.lambda == head.lambda
                && r.rank == head.rank
                && r.dist == head.dist
                && r.alpha == head.alpha
        };
        let end = start + reps[start..].iter().take_while(|r| same(r)).count();
        let group = &reps[start..end];
        let evals: Vec<EvalResult> = group.iter().filter_map(|r| r.eval.clone()).collect();
        let secs: Vec<f64> = group.iter().map(|r| r.fit_secs).collect();
        let n = group.len() as f64;
        out.push(CellSummary {
            method: head.method,
            rate: head.rate,
            lambda: head.lambda,
            rank: head.rank,
            dist: head.dist,
            alpha: head.alpha,
            seed: base_seed,
            eval: if evals.len() == group.len() {
                metrics::aggregate(&evals).ok()
            } else {
                None
            },
            mean_iters: group.iter().map(|r| r.iters as f64).sum::<f64>() / n,
            converged_share: group.iter().filter(|r| r.converged).count() as f64 / n,
            mean_secs: secs.iter().sum::<f64>() / n,
            median_secs: metrics::median(&secs).unwrap_or(0.0),
            errors: group.iter().filter_map(|r| r.error.clone()).collect(),
        });
        start = end;
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

const CONFIG_COLUMNS: [&str; 7] = ["method", "rate", "lambda", "rank", "dist", "alpha", "seed"];

/// Per-cell means. Timings are kept out of the CSV (see [`write_timings`])
/// so that repeated runs produce identical files.
pub fn write_results_csv(path: &Path, summaries: &[CellSummary], grid: &ExperimentGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = CONFIG_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend([
        "replications".to_string(),
        "rmse".to_string(),
        "prmse".to_string(),
        format!("hit_at_{}", grid.hit_k),
        format!("ndcg_at_{}", grid.ndcg_k),
        "mean_iters".to_string(),
        "converged_share".to_string(),
        "status".to_string(),
    ]);
    w.write_record(&header)?;
    for s in summaries {
        let e = s.eval.as_ref();
        let status = if s.errors.is_empty() {
            "ok".to_string()
        } else {
            format!("error: {}", s.errors[0])
        };
        w.write_record([
            s.method.name().to_string(),
            format!("{:?}", s.rate),
            format!("{:?}", s.lambda),
            s.rank.to_string(),
            s.dist.name().to_string(),
            format!("{:?}", s.alpha),
            s.seed.to_string(),
            grid.replications.to_string(),
            opt(e.map(|e| e.rmse)),
            opt(e.and_then(|e| e.prmse)),
            opt(e.map(|e| e.hit_at_k)),
            opt(e.map(|e| e.ndcg_at_k)),
            format!("{:?}", s.mean_iters),
            format!("{:?}", s.converged_share),
            status,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per replication, each re-runnable from its own seed.
pub fn write_replications_csv(path: &Path, reps: &[RepResult], grid: &ExperimentGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = CONFIG_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend([
        "rmse".to_string(),
        "prmse".to_string(),
        format!("hit_at_{}", grid.hit_k),
        format!("ndcg_at_{}", grid.ndcg_k),
        "iters".to_string(),
        "converged".to_string(),
        "status".to_string(),
    ]);
    w.write_record(&header)?;
    for r in reps {
        let e = r.eval.as_ref();
        w.write_record([
            r.method.name().to_string(),
            format!("{:?}", r.rate),
            format!("{:?}", r.lambda),
            r.rank.to_string(),
            r.dist.name().to_string(),
            format!("{:?}", r.alpha),
            r.seed.to_string(),
            opt(e.map(|e| e.rmse)),
            opt(e.and_then(|e| e.prmse)),
            opt(e.map(|e| e.hit_at_k)),
            opt(e.map(|e| e.ndcg_at_k)),
            r.iters.to_string(),
            r.converged.to_string(),
            r.error.as_deref().map_or("ok".to_string(), |e| format!("error: {e}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TimingRow<'a> {
    method: Method,
    rate: f64,
    lambda: f64,
    rank: usize,
    dist: FactorDist,
    alpha: f64,
    mean_secs: f64,
    median_secs: f64,
    per_replication_secs: Vec<f64>,
    errors: &'a [String],
}

/// Wall-clock of the fit loop per cell, mean and median over replications.
pub fn write_timings(path: &Path, summaries: &[CellSummary], reps: &[RepResult]) -> Result<()> {
    let rows: Vec<TimingRow<'_>> = summaries
        .iter()
        .map(|s| TimingRow {
            method: s.method,
            rate: s.rate,
            lambda: s.lambda,
            rank: s.rank,
            dist: s.dist,
            alpha: s.alpha,
            mean_secs: s.mean_secs,
            median_secs: s.median_secs,
            per_replication_secs: reps
                .iter()
                .filter(|r| {
                    r.method == s.method
                        && r.rate == s.rate
                        && r.lambda == s.lambda
                        && r.rank == s.rank
                        && r.dist == s.dist
                        && r.alpha == s.alpha
                })
                .map(|r| r.fit_secs)
                .collect(),
            errors: &s.errors,
        })
        .collect();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(f, &rows)?;
    Ok(())
}

/// Metric-versus-rate charts, one per metric and data setting. Methods
/// without a rate (full) are drawn as flat lines across the rate range.
pub fn write_charts(dir: &Path, summaries: &[CellSummary], grid: &ExperimentGrid) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lo, hi) = grid
        .rates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    type Key = (String, String, usize, String);
    let mut groups: BTreeMap<Key, Vec<&CellSummary>> = BTreeMap::new();
    for s in summaries {
        let key = (s.dist.name().to_string(), format!("{:?}", s.alpha), s.rank, format!("{:?}", s.lambda));
        groups.entry(key).or_default().push(s);
    }
    type Metric = fn(&EvalResult) -> Option<f64>;
    let metric_list: [(&str, Metric); 4] = [
        ("rmse", |e| Some(e.rmse)),
        ("prmse", |e| e.prmse),
        ("hit", |e| Some(e.hit_at_k)),
        ("ndcg", |e| Some(e.ndcg_at_k)),
    ];
    let mut written = Vec::new();
    for ((dist, alpha, rank, lambda), cells) in groups {
        for (metric, get) in metric_list {
            let mut series: Vec<Series> = Vec::new();
            for &m in &grid.methods {
                let mut points: Vec<(f64, f64)> = Vec::new();
                for c in cells.iter().filter(|c| c.method == m) {
                    let Some(v) = c.eval.as_ref().and_then(get) else { continue };
                    if m == Method::Full {
                        points.push((lo, v));
                        points.push((hi, v));
                    } else {
                        points.push((c.rate, v));
                    }
                }
                if !points.is_empty() {
                    series.push(Series {
                        label: m.name().to_string(),
                        points,
                    });
                }
            }
            let label = match metric {
                "hit" => format!("Hit@{}", grid.hit_k),
                "ndcg" => format!("NDCG@{}", grid.ndcg_k),
                m => m.to_uppercase(),
            };
            let title = format!("{label}: {dist}, alpha={alpha}, rank={rank}, lambda={lambda}");
            let svg = line_chart(&title, "subsampling rate", &label, &series);
            let name = format!("{metric}_{dist}_a{alpha}_k{rank}_l{lambda}.svg");
            let path = dir.join(&name);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(name);
        }
    }
    Ok(written)
}
