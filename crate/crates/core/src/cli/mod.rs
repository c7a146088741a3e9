//! Command-line harness: `synth`, `fit`, `bench`, `restore` and `eval`.
//!
//! Every command writes into `--out-dir`. CSV outputs depend only on inputs
//! and seeds; wall-clock measurements go to JSON files next to them.

pub mod grid;
pub mod svg;

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Method, SolverConfig};
use crate::error::{Error, Result};
use crate::factors::{load_matrix, save_matrix, FactorPair};
use crate::imaging::{mask_image, psnr, restore, GrayImage, RestoreConfig};
use crate::metrics::{self, EvalOptions};
use crate::ratings::{split_holdout, HoldoutSplit, RatingMatrix};
use crate::synth::{generate_rating_matrix, FactorDist, SyntheticConfig};
use grid::ExperimentGrid;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "coreals", version, about = "ALS matrix completion with core-elements sketching")]
pub struct Cli {
    /// Seed for data generation, splits and solvers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the row solves.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Record per-regression approximation diagnostics (core methods).
    #[arg(long, global = true)]
    pub diagnostics: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rating matrix with ground truth.
    Synth(SynthArgs),
    /// Fit factors to a rating CSV.
    Fit(FitArgs),
    /// Run a benchmark grid over methods and rates.
    Bench(BenchArgs),
    /// Mask and restore a grayscale image.
    Restore(RestoreArgs),
    /// Evaluate saved factors on held-out ratings.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic config (a previous manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dist: Option<FactorDist>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// One or more densities; several produce one dataset each.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct SolverArgs {
    /// JSON solver config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Rating CSV (`user,item,rating`).
    pub data: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Hold out this fraction of ratings and evaluate on it.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Noiseless ground truth (`.cals`) for PRMSE when holding out.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Write one diagnostics line per regression instead of per half-iteration.
    #[arg(long)]
    pub diagnostics_per_row: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON experiment grid; flags override its fields.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub dists: Vec<FactorDist>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Skip the discarded warm-up fit per cell.
    #[arg(long)]
    pub no_warmup: bool,
    /// Run cells concurrently (timings are then not comparable).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Grayscale image (`.pgm` or `.csv`).
    pub image: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0.6)]
    pub mask_fraction: f64,
    /// Copy observed pixels through unchanged.
    #[arg(long)]
    pub keep_observed: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `users.cals` and `items.cals`.
    #[arg(long)]
    pub factors: PathBuf,
    /// Split manifest (`user,item,rating,fold`) written by `fit --holdout`.
    #[arg(long, conflicts_with_all = ["data", "test"])]
    pub split: Option<PathBuf>,
    /// Training ratings, with `--test`.
    #[arg(long, requires = "test")]
    pub data: Option<PathBuf>,
    /// Held-out ratings in the same ID space as `--data`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Noiseless ground truth (`.cals`) for PRMSE.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub hit_k: usize,
    #[arg(long, default_value_t = 10)]
    pub ndcg_k: usize,
    #[arg(long, default_value_t = metrics::RELEVANCE_PERCENTILE)]
    pub percentile: f64,
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Singular { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::Restore(a) => cmd_restore(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

/// Reads a JSON config; unreadable or malformed files are config errors.
fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(path, e))
}

fn alpha_tag(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.dist {
        cfg.dist = v;
    }
    if let Some(v) = a.n_users {
        cfg.n_users = v;
    }
    if let Some(v) = a.n_items {
        cfg.n_items = v;
    }
    if let Some(v) = a.rank {
        cfg.rank = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.noise_sd {
        cfg.noise_sd = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    let alphas = if a.alpha.is_empty() { vec![cfg.alpha] } else { a.alpha.clone() };
    for &alpha in &alphas {
        let cfg = SyntheticConfig { alpha, ..cfg.clone() };
        let dir = if alphas.len() == 1 {
            cli.out_dir.clone()
        } else {
            cli.out_dir.join(alpha_tag(alpha))
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let data = generate_rating_matrix(&cfg)?;
        data.ratings.write_csv_path(dir.join("ratings.csv"))?;
        save_matrix(&data.truth, dir.join("truth.cals"))?;
        let mut manifest = serde_json::to_value(&cfg)?;
        if let Value::Object(m) = &mut manifest {
            m.insert("nnz".into(), json!(data.ratings.nnz()));
            m.insert("repaired".into(), json!(data.repaired));
            m.insert("unresolved".into(), json!(data.unresolved));
            m.insert("ratings".into(), json!("ratings.csv"));
            m.insert("truth".into(), json!("truth.cals"));
        }
        write_json(&dir.join("manifest.json"), &manifest)?;
        println!("{}: {} ratings", dir.display(), data.ratings.nnz());
    }
    Ok(())
}

fn solver_config(cli: &Cli, a: &SolverArgs, base: SolverConfig) -> Result<SolverConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => base,
    };
    if let Some(v) = a.method {
        cfg.method = v;
    }
    if let Some(v) = a.rank {
        cfg.rank = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.rate {
        cfg.rate = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.diagnostics |= cli.diagnostics;
    cfg.validate()?;
    Ok(cfg)
}

/// Truth on every cell outside `train`.
fn heldout_from_truth(train: &RatingMatrix, truth: &ndarray::Array2<f64>) -> Result<Vec<(usize, usize, f64)>> {
    if truth.dim() != (train.n_users(), train.n_items()) {
        return Err(Error::DimensionMismatch(format!(
            "truth is {:?}, ratings are {}x{}",
            truth.dim(),
            train.n_users(),
            train.n_items()
        )));
    }
    let mut out = Vec::new();
    for u in 0..train.n_users() {
        let (items, _) = train.user_ratings(u);
        let mut next = items.iter().peekable();
        for i in 0..train.n_items() {
            if next.peek().is_some_and(|&&k| k as usize == i) {
                next.next();
            } else {
                out.push((u, i, truth[[u, i]]));
            }
        }
    }
    Ok(out)
}

fn write_eval_csv(path: &Path, cfg: Option<&SolverConfig>, e: &metrics::EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let hit = format!("hit_at_{}", e.hit_k);
    let ndcg = format!("ndcg_at_{}", e.ndcg_k);
    w.write_record(["method", "rate", "lambda", "rank", "seed", "rmse", "prmse", &hit, &ndcg])?;
    let echo = |f: fn(&SolverConfig) -> String| cfg.map(f).unwrap_or_default();
    w.write_record([
        echo(|c| c.method.name().to_string()),
        echo(|c| format!("{:?}", c.rate)),
        echo(|c| format!("{:?}", c.lambda)),
        echo(|c| c.rank.to_string()),
        echo(|c| c.seed.to_string()),
        format!("{:?}", e.rmse),
        e.prmse.map(|v| format!("{v:?}")).unwrap_or_default(),
        format!("{:?}", e.hit_at_k),
        format!("{:?}", e.ndcg_at_k),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let cfg = solver_config(cli, &a.solver, SolverConfig::default())?;
    let data = RatingMatrix::read_csv_path(&a.data)?;
    let split = match a.holdout {
        Some(f) => {
            let s = split_holdout(&data, f, cfg.seed)?;
            let path = cli.out_dir.join("split.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            s.write_manifest(BufWriter::new(file))?;
            Some(s)
        }
        None => None,
    };
    let train = split.as_ref().map_or(&data, |s| &s.train);

    let t0 = Instant::now();
    let (factors, report) = crate::als::fit(train, &cfg)?;
    let fit_secs = t0.elapsed().as_secs_f64();

    let out = &cli.out_dir;
    save_matrix(&factors.users, out.join("users.cals"))?;
    save_matrix(&factors.items, out.join("items.cals"))?;
    let trace_path = out.join("trace.csv");
    let f = File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    report.write_trace_csv(BufWriter::new(f))?;
    if cfg.diagnostics && !report.diagnostics.is_empty() {
        let p = out.join("diagnostics.csv");
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        report.write_diagnostics_csv(BufWriter::new(f), !a.diagnostics_per_row)?;
    }
    write_json(
        &out.join("report.json"),
        &json!({ "config": cfg, "report": report, "fit_secs": fit_secs }),
    )?;
    if let Some(s) = &split {
        let truth = a.truth.as_ref().map(load_matrix).transpose()?;
        let heldout = truth.map(|t| heldout_from_truth(&s.train, &t)).transpose()?;
        let e = metrics::evaluate(&s.train, &s.test, heldout.as_deref(), &factors, EvalOptions::default())?;
        write_eval_csv(&out.join("eval.csv"), Some(&cfg), &e)?;
    }
    println!(
        "{}: {} iterations, converged={}, objective={}",
        cfg.method,
        report.iters_run,
        report.converged,
        report.final_objective().map_or("n/a".to_string(), |v| format!("{v:.6e}"))
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (train, test) = match (&a.split, &a.data, &a.test) {
        (Some(p), _, _) => {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            let s = HoldoutSplit::read_manifest(f)?;
            (s.train, s.test)
        }
        (None, Some(d), Some(t)) => {
            let train = RatingMatrix::read_csv_path(d)?;
            let raw = RatingMatrix::read_csv_path(t)?;
            let mut test = Vec::with_capacity(raw.nnz());
            let mut unknown = 0usize;
            for e in raw.entries() {
                let u = train.user_ids().index_of(raw.user_ids().id_of(e.user));
                let i = train.item_ids().index_of(raw.item_ids().id_of(e.item));
                match (u, i) {
                    (Some(u), Some(i)) => test.push((u, i, e.rating)),
                    _ => unknown += 1,
                }
            }
            if unknown > 0 {
                log::warn!("{unknown} test ratings refer to users or items absent from training data");
            }
            (train, test)
        }
        _ => return Err(Error::config("eval needs --split, or --data with --test")),
    };
    let factors = FactorPair::new(
        load_matrix(a.factors.join("users.cals"))?,
        load_matrix(a.factors.join("items.cals"))?,
    )?;
    let truth = a.truth.as_ref().map(load_matrix).transpose()?;
    let heldout = truth.map(|t| heldout_from_truth(&train, &t)).transpose()?;
    let opts = EvalOptions {
        hit_k: a.hit_k,
        ndcg_k: a.ndcg_k,
        percentile: a.percentile,
    };
    let e = metrics::evaluate(&train, &test, heldout.as_deref(), &factors, opts)?;
    write_eval_csv(&cli.out_dir.join("eval.csv"), None, &e)?;
    println!(
        "rmse={:.6} hit@{}={:.4} ndcg@{}={:.4}",
        e.rmse, e.hit_k, e.hit_at_k, e.ndcg_k, e.ndcg_at_k
    );
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut g: ExperimentGrid = match &a.grid {
        Some(p) => read_json(p)?,
        None => ExperimentGrid::default(),
    };
    if !a.methods.is_empty() {
        g.methods = a.methods.clone();
    }
    if !a.rates.is_empty() {
        g.rates = a.rates.clone();
    }
    if !a.lambdas.is_empty() {
        g.lambdas = a.lambdas.clone();
    }
    if !a.ranks.is_empty() {
        g.ranks = a.ranks.clone();
    }
    if !a.dists.is_empty() {
        g.dists = a.dists.clone();
    }
    if !a.alphas.is_empty() {
        g.alphas = a.alphas.clone();
    }
    if let Some(v) = a.replications {
        g.replications = v;
    }
    if let Some(v) = a.n_users {
        g.n_users = v;
    }
    if let Some(v) = a.n_items {
        g.n_items = v;
    }
    if let Some(v) = a.max_iters {
        g.max_iters = v;
    }
    if let Some(v) = cli.seed {
        g.seed = v;
    }
    if cli.threads.is_some() {
        g.threads = cli.threads;
    }
    g.warmup &= !a.no_warmup;
    g.parallel |= a.parallel;
    g.validate()?;

    let (reps, summaries) = grid::run_grid(&g)?;
    let out = &cli.out_dir;
    grid::write_results_csv(&out.join("results.csv"), &summaries, &g)?;
    grid::write_replications_csv(&out.join("replications.csv"), &reps, &g)?;
    grid::write_timings(&out.join("timings.json"), &summaries, &reps)?;
    write_json(&out.join("grid.json"), &g)?;
    let charts = grid::write_charts(&out.join("charts"), &summaries, &g)?;
    let failed = summaries.iter().filter(|s| !s.errors.is_empty()).count();
    println!(
        "{} cells, {} failed, {} charts in {}",
        summaries.len(),
        failed,
        charts.len(),
        out.join("charts").display()
    );
    Ok(())
}

fn cmd_restore(cli: &Cli, a: &RestoreArgs) -> Result<()> {
    let base = SolverConfig {
        method: Method::Core,
        rank: 50,
        lambda: 0.01,
        rate: 0.15,
        max_iters: 5,
        ..Default::default()
    };
    let solver = solver_config(cli, &a.solver, base)?;
    let img = GrayImage::load(&a.image)?;
    let masked = mask_image(&img, a.mask_fraction, solver.seed)?;
    let cfg = RestoreConfig {
        solver: solver.clone(),
        keep_observed: a.keep_observed,
    };
    let t0 = Instant::now();
    let (restored, _, report) = restore(&masked, &cfg)?;
    let secs = t0.elapsed().as_secs_f64();

    let ext = a
        .image
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_else(|| "pgm".into());
    let out = &cli.out_dir;
    restored.save(out.join(format!("restored.{ext}")))?;
    let mut holes = vec![0.0; img.width() * img.height()];
    for e in masked.entries() {
        holes[e.user * img.width() + e.item] = e.rating;
    }
    GrayImage::new(img.width(), img.height(), holes)?.save(out.join(format!("masked.{ext}")))?;

    let quality = psnr(&img, &restored)?;
    let rmse = crate::imaging::mse(&img, &restored)?.sqrt();
    let path = out.join("restore.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "method",
        "rate",
        "lambda",
        "rank",
        "max_iters",
        "mask_fraction",
        "seed",
        "keep_observed",
        "iters",
        "psnr",
        "rmse",
    ])?;
    w.write_record([
        solver.method.name().to_string(),
        format!("{:?}", solver.rate),
        format!("{:?}", solver.lambda),
        solver.rank.to_string(),
        solver.max_iters.to_string(),
        format!("{:?}", a.mask_fraction),
        solver.seed.to_string(),
        a.keep_observed.to_string(),
        report.iters_run.to_string(),
        format!("{quality:?}"),
        format!("{rmse:?}"),
    ])?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(
        &out.join("restore_timings.json"),
        &json!({ "timings": report.timings, "restore_secs": secs }),
    )?;
    println!("psnr={quality:.2} dB rmse={rmse:.5}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Singular { context: "x".into() }), EXIT_NUMERICAL);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        assert_eq!(main_with_args(["coreals", "fit"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["coreals", "bench", "--methods", "sgd"]), EXIT_CONFIG);
    }
}
