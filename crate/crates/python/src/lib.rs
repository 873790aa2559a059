//! Python bindings: datasets, forgetting weights, the weighted ridge solver,
//! hypergradients, bi-level fitting, synthetic data and evaluation helpers.

use std::path::PathBuf;

use forgecast::bilevel::{self, BatchReduction, OptimizerConfig};
use forgecast::evaluation;
use forgecast::forgetting::{weight_vector, ForgettingParams, MechanismKind};
use forgecast::harness::{self, ExperimentConfig, Method, MethodSettings};
use forgecast::ridge::{self, HessianMode, HyperObjective, SolverConfig};
use forgecast::synthgen::{self, DgpConfig, DgpKind};
use forgecast::{AgeVector, WeightVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: forgecast::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} `{s}`")))
}

fn solver(ridge_penalty: f64, hessian_mode: &str) -> PyResult<SolverConfig> {
    let mode = match hessian_mode {
        "exact" => HessianMode::Exact,
        "identity" => HessianMode::Identity,
        other => return Err(PyValueError::new_err(format!("unknown hessian mode `{other}`"))),
    };
    Ok(SolverConfig::new(ridge_penalty).map_err(err)?.with_hessian_mode(mode))
}

/// Feature rows with scalar labels.
#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(forgecast::Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Self> {
        forgecast::Dataset::new(rows, labels).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.0.labels().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().map(|r| r.to_vec()).collect()
    }
}

/// Contiguous train / validation / test boundaries.
#[pyclass(name = "Split", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PySplit(forgecast::SplitSpec);

#[pymethods]
impl PySplit {
    #[new]
    fn new(total: usize, train_end: usize, valid_end: usize, test_end: usize) -> PyResult<Self> {
        forgecast::SplitSpec::new(total, train_end, valid_end, test_end)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_lengths(total: usize, train_end: usize, valid_len: usize, test_len: usize) -> PyResult<Self> {
        forgecast::make_split(total, train_end, valid_len, test_len)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn train_end(&self) -> usize {
        self.0.train_end()
    }

    #[getter]
    fn valid_end(&self) -> usize {
        self.0.valid_end()
    }

    #[getter]
    fn test_end(&self) -> usize {
        self.0.test_end()
    }

    fn __repr__(&self) -> String {
        format!(
            "Split(train_end={}, valid_end={}, test_end={})",
            self.0.train_end(),
            self.0.valid_end(),
            self.0.test_end()
        )
    }
}

/// Weights `alpha(age; eta)` of a mechanism (`exponential` or `mixed_decay`).
#[pyfunction]
fn forgetting_weights(kind: &str, eta: Vec<f64>, ages: Vec<u64>) -> PyResult<Vec<f64>> {
    let params = ForgettingParams::new(parse::<MechanismKind>(kind, "mechanism")?, eta).map_err(err)?;
    Ok(weight_vector(&params, &AgeVector::from_ages(ages)).into_inner())
}

/// Weighted ridge coefficients fit on the training segment.
#[pyfunction]
#[pyo3(signature = (dataset, split, weights, ridge_penalty = 0.0))]
fn ridge_solve(dataset: &PyDataset, split: &PySplit, weights: Vec<f64>, ridge_penalty: f64) -> PyResult<Vec<f64>> {
    let w = WeightVector::new(weights).map_err(err)?;
    let sol = ridge::solve(&dataset.0, &split.0, &w, &SolverConfig::new(ridge_penalty).map_err(err)?).map_err(err)?;
    Ok(sol.theta().iter().copied().collect())
}

/// `(gradient, loss)` of the validation squared-error sum over `subset` with respect to `eta`.
#[pyfunction]
#[pyo3(signature = (dataset, split, kind, eta, subset = None, ridge_penalty = 0.0, hessian_mode = "exact"))]
fn upper_gradient(
    dataset: &PyDataset,
    split: &PySplit,
    kind: &str,
    eta: Vec<f64>,
    subset: Option<Vec<usize>>,
    ridge_penalty: f64,
    hessian_mode: &str,
) -> PyResult<(Vec<f64>, f64)> {
    let obj = HyperObjective::new(
        &dataset.0,
        split.0,
        parse(kind, "mechanism")?,
        solver(ridge_penalty, hessian_mode)?,
    );
    let subset = subset.unwrap_or_else(|| split.0.valid().collect());
    let g = obj.gradient(&eta, &subset).map_err(err)?;
    Ok((g.gradient, g.valid_loss))
}

/// Learn forgetting parameters by bi-level SGD and refit on training plus validation.
#[pyfunction]
#[pyo3(signature = (dataset, split, kind, ridge_penalty = 0.0, epochs = 50, restarts = 5, step_size = 0.1, momentum = 0.9, batch_size = 32, seed = 0, batch_reduction = "mean"))]
#[allow(clippy::too_many_arguments)]
fn bilevel_fit<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    split: &PySplit,
    kind: &str,
    ridge_penalty: f64,
    epochs: usize,
    restarts: usize,
    step_size: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    batch_reduction: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let batch_reduction = match batch_reduction {
        "mean" => BatchReduction::Mean,
        "sum" => BatchReduction::Sum,
        other => return Err(PyValueError::new_err(format!("unknown batch reduction `{other}` (expected mean or sum)"))),
    };
    let opt = OptimizerConfig {
        step_size,
        momentum,
        epochs,
        batch_size,
        restarts,
        rng_seed: seed,
        batch_reduction,
        ..OptimizerConfig::default()
    };
    let kind: MechanismKind = parse(kind, "mechanism")?;
    let solver = SolverConfig::new(ridge_penalty).map_err(err)?;
    let res = py
        .detach(|| bilevel::fit(&dataset.0, &split.0, kind, &solver, &opt))
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("eta", res.best_eta.eta().to_vec())?;
    out.set_item("valid_loss", res.best_valid_loss)?;
    out.set_item("theta", res.final_model.theta().iter().copied().collect::<Vec<_>>())?;
    out.set_item(
        "restart_losses",
        res.restart_traces.iter().map(|t| t.losses.clone()).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

/// Select, refit and score one registered method; returns its test predictions and MSE.
#[pyfunction]
#[pyo3(signature = (method, dataset, split, ridge_grid = None, seed = 0))]
fn run_method<'py>(
    py: Python<'py>,
    method: &str,
    dataset: &PyDataset,
    split: &PySplit,
    ridge_grid: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let m: Method = method.parse().map_err(err)?;
    let grid = ridge_grid.unwrap_or_else(|| harness::config::DEFAULT_RIDGE_GRID.to_vec());
    let settings = MethodSettings::default();
    let out = py
        .detach(|| harness::run_method(m, &dataset.0, &split.0, &settings, &grid, seed))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("method", m.name())?;
    d.set_item("ridge_penalty", out.ridge_penalty)?;
    d.set_item("valid_mse", out.valid_mse)?;
    d.set_item("test_mse", out.test_mse)?;
    d.set_item("predictions", out.predictions)?;
    Ok(d)
}

/// Simulate a synthetic series: `(values, coefficients, regimes)`.
#[pyfunction]
#[pyo3(signature = (kind, seed, length = synthgen::DEFAULT_LENGTH, noise_sd = synthgen::DEFAULT_NOISE_SD))]
fn generate(kind: &str, seed: u64, length: usize, noise_sd: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<u8>)> {
    let kind: DgpKind = parse(kind, "process")?;
    let s = synthgen::generate(&DgpConfig { kind, length, noise_sd }, seed).map_err(err)?;
    Ok((s.values, s.coefficients, s.regimes))
}

/// Three-lag autoregressive dataset of a raw series.
#[pyfunction]
fn to_supervised(values: Vec<f64>) -> PyResult<PyDataset> {
    synthgen::to_supervised(&values).map(PyDataset).map_err(err)
}

#[pyfunction]
fn mse(predictions: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    evaluation::mse(&predictions, &labels).map_err(err)
}

/// Two-sided paired signed-rank test: `(statistic, p_value)`.
#[pyfunction]
fn wilcoxon(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = evaluation::wilcoxon_signed_rank(&a, &b).map_err(err)?;
    Ok((r.statistic(), r.p_value))
}

/// Run a TOML experiment config, write its artifacts and return the text table.
#[pyfunction]
fn run_config(py: Python<'_>, path: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::from_path(&path).map_err(err)?;
    let exp = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    Ok(exp.table.to_text())
}

#[pymodule]
#[pyo3(name = "forgecast")]
fn forgecast_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplit>()?;
    m.add_function(wrap_pyfunction!(forgetting_weights, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_solve, m)?)?;
    m.add_function(wrap_pyfunction!(upper_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(bilevel_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_method, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(to_supervised, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
