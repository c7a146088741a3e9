//! Python bindings: rating matrices, fitting, sketches, synthetic data,
//! metrics and image quality.

use ::coreals as lib;
use lib::metrics::RELEVANCE_PERCENTILE;
use lib::{Error, FactorDist, Method, SolverConfig, SyntheticConfig, TestSets};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

type Triples = Vec<(usize, usize, f64)>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, p), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Sparse ratings with dense user and item indices.
#[pyclass(name = "RatingMatrix", module = "coreals", frozen)]
struct PyRatingMatrix {
    inner: lib::RatingMatrix,
}

#[pymethods]
impl PyRatingMatrix {
    #[new]
    fn new(n_users: usize, n_items: usize, entries: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        let inner = lib::RatingMatrix::new(n_users, n_items, &entries).map_err(to_py)?;
        Ok(PyRatingMatrix { inner })
    }

    /// Reads a `user,item,rating[,date]` CSV; IDs are remapped to indices.
    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let inner = lib::RatingMatrix::read_csv_path(path).map_err(to_py)?;
        Ok(PyRatingMatrix { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv_path(path).map_err(to_py)
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.inner.triples()
    }

    fn transpose(&self) -> Self {
        PyRatingMatrix {
            inner: self.inner.transpose(),
        }
    }

    /// Splits into a training matrix and held-out `(user, item, rating)` triples.
    #[pyo3(signature = (fraction_test, seed = 0))]
    fn split(&self, fraction_test: f64, seed: u64) -> PyResult<(Self, Triples)> {
        let s = lib::split_holdout(&self.inner, fraction_test, seed).map_err(to_py)?;
        Ok((PyRatingMatrix { inner: s.train }, s.test))
    }

    fn __len__(&self) -> usize {
        self.inner.nnz()
    }

    fn __repr__(&self) -> String {
        format!("RatingMatrix({}x{}, nnz={})", self.inner.n_users(), self.inner.n_items(), self.inner.nnz())
    }
}

#[pyclass(name = "Factors", module = "coreals", frozen)]
struct PyFactors {
    inner: lib::FactorPair,
}

#[pymethods]
impl PyFactors {
    #[new]
    fn new(users: Vec<Vec<f64>>, items: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = lib::FactorPair::new(from_rows(users)?, from_rows(items)?).map_err(to_py)?;
        Ok(PyFactors { inner })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn users(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.users)
    }

    #[getter]
    fn items(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.items)
    }

    fn predict(&self, user: usize, item: usize) -> PyResult<f64> {
        self.inner.predict(user, item).map_err(to_py)
    }

    /// Dense `U M^T`.
    fn reconstruct(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.reconstruct())
    }

    fn __repr__(&self) -> String {
        format!("Factors(users={}, items={}, rank={})", self.inner.n_users(), self.inner.n_items(), self.inner.rank())
    }
}

#[pyclass(name = "FitReport", module = "coreals", frozen, get_all)]
struct PyFitReport {
    method: String,
    objective_trace: Vec<f64>,
    rmse_trace: Vec<f64>,
    iters_run: usize,
    converged: bool,
    total_secs: f64,
    sketch_secs: f64,
    solve_secs: f64,
    warnings: Vec<String>,
}

#[pymethods]
impl PyFitReport {
    fn __repr__(&self) -> String {
        format!(
            "FitReport(method={}, iters_run={}, converged={}, objective={})",
            self.method,
            self.iters_run,
            if self.converged { "True" } else { "False" },
            self.objective_trace.last().map_or("None".into(), |v| v.to_string())
        )
    }
}

impl From<lib::FitReport> for PyFitReport {
    fn from(r: lib::FitReport) -> Self {
        PyFitReport {
            method: r.method.name().to_string(),
            objective_trace: r.objective_trace,
            rmse_trace: r.rmse_trace,
            iters_run: r.iters_run,
            converged: r.converged,
            total_secs: r.timings.total_secs,
            sketch_secs: r.timings.sketch_secs,
            solve_secs: r.timings.solve_secs,
            warnings: r.warnings,
        }
    }
}

/// Fits factors with one of `full`, `core`, `fast_core`, `unif`, `blev`.
#[pyfunction]
#[pyo3(signature = (ratings, method = "full", rank = 10, lam = 0.1, rate = 1.0, max_iters = 50, tol = 0.01, seed = 0, threads = None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    ratings: &PyRatingMatrix,
    method: &str,
    rank: usize,
    lam: f64,
    rate: f64,
    max_iters: usize,
    tol: f64,
    seed: u64,
    threads: Option<usize>,
) -> PyResult<(PyFactors, PyFitReport)> {
    let method: Method = method.parse().map_err(to_py)?;
    let cfg = SolverConfig {
        threads,
        ..SolverConfig::new(method, rank, lam)
            .with_rate(rate)
            .with_max_iters(max_iters)
            .with_tol(tol)
            .with_seed(seed)
    };
    let r = &ratings.inner;
    let (f, rep) = py.detach(|| lib::fit(r, &cfg)).map_err(to_py)?;
    Ok((PyFactors { inner: f }, rep.into()))
}

/// Keeps the `max(1, floor(n * rate))` largest-magnitude entries of every
/// column and zeroes the rest.
#[pyfunction]
fn ces_sketch(x: Vec<Vec<f64>>, rate: f64) -> PyResult<Vec<Vec<f64>>> {
    let x = from_rows(x)?;
    let sk = lib::ces_sketch(&x.view(), rate).map_err(to_py)?;
    Ok(to_rows(&sk.to_dense()))
}

/// Synthetic low-rank ratings; returns the observed matrix and the
/// noiseless truth.
#[pyfunction]
#[pyo3(signature = (n_users, n_items, rank = 10, alpha = 0.4, dist = "normal", rho = 0.6, noise_sd = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    n_users: usize,
    n_items: usize,
    rank: usize,
    alpha: f64,
    dist: &str,
    rho: f64,
    noise_sd: f64,
    seed: u64,
) -> PyResult<(PyRatingMatrix, Vec<Vec<f64>>)> {
    let dist: FactorDist = dist.parse().map_err(to_py)?;
    let cfg = SyntheticConfig::new(dist, n_users, n_items, rank, alpha)
        .with_rho(rho)
        .with_noise_sd(noise_sd)
        .with_seed(seed);
    let d = lib::generate_rating_matrix(&cfg).map_err(to_py)?;
    Ok((PyRatingMatrix { inner: d.ratings }, to_rows(&d.truth)))
}

/// Relative error over the observed entries.
#[pyfunction]
fn rmse(ratings: &PyRatingMatrix, factors: &PyFactors) -> PyResult<f64> {
    lib::rmse(&ratings.inner, &factors.inner).map_err(to_py)
}

/// Relative error over `(user, item, truth)` cells.
#[pyfunction]
fn prmse(heldout: Vec<(usize, usize, f64)>, factors: &PyFactors) -> PyResult<f64> {
    lib::prmse(&heldout, &factors.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (test, factors, k = 5, percentile = RELEVANCE_PERCENTILE))]
fn hit_at_k(test: Vec<(usize, usize, f64)>, factors: &PyFactors, k: usize, percentile: f64) -> PyResult<f64> {
    let sets = TestSets::new(factors.inner.n_users(), &test, percentile).map_err(to_py)?;
    lib::hit_at_k(&sets, &factors.inner, k).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (test, factors, k = 10, percentile = RELEVANCE_PERCENTILE))]
fn ndcg_at_k(test: Vec<(usize, usize, f64)>, factors: &PyFactors, k: usize, percentile: f64) -> PyResult<f64> {
    let sets = TestSets::new(factors.inner.n_users(), &test, percentile).map_err(to_py)?;
    lib::ndcg_at_k(&sets, &factors.inner, k).map_err(to_py)
}

/// PSNR in dB of two images given as rows of pixels in `[0, 1]`.
#[pyfunction]
fn psnr(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = lib::GrayImage::from_matrix(&from_rows(a)?).map_err(to_py)?;
    let b = lib::GrayImage::from_matrix(&from_rows(b)?).map_err(to_py)?;
    lib::psnr(&a, &b).map_err(to_py)
}

#[pymodule]
fn _coreals(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRatingMatrix>()?;
    m.add_class::<PyFactors>()?;
    m.add_class::<PyFitReport>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(ces_sketch, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(prmse, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
