//! Python bindings: density primitives, the structural pricing model,
//! metrics, embedding files and the batch commands.

use std::collections::HashMap;
use std::path::PathBuf;

use demandkit::encoder::load_external_embeddings;
use demandkit::metrics::compute_metrics as core_metrics;
use demandkit::structural::{QuadratureConfig, StructuralModel as CoreModel};
use demandkit::{BidderGrid, MarketSizeParams};
use demandkit_cli::commands::{self, TrainMode};
use demandkit_cli::config::{ModelKind, RunConfig, SweepModel};
use demandkit_cli::error::{CliError, ErrorKind};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(demandkit_py, DemandkitError, PyException);
create_exception!(demandkit_py, ConfigError, DemandkitError);
create_exception!(demandkit_py, DataError, DemandkitError);
create_exception!(demandkit_py, NumericalError, DemandkitError);

fn core_err(e: demandkit::Error) -> PyErr {
    cli_err(CliError::from_core("demandkit", e))
}

fn cli_err(e: CliError) -> PyErr {
    match e.kind {
        ErrorKind::Config => ConfigError::new_err(e.message),
        ErrorKind::Data => DataError::new_err(e.message),
        ErrorKind::Numerical => NumericalError::new_err(e.message),
        ErrorKind::Other => DemandkitError::new_err(e.message),
    }
}

fn paths(files: Vec<PathBuf>) -> Vec<String> {
    files.into_iter().map(|p| p.display().to_string()).collect()
}

/// Log-valuation density `c * (1 + sum alpha_k z^k)^2 * phi(z) / sigma`.
#[pyclass(name = "ValuationParams", module = "demandkit_py", frozen)]
struct PyValuation {
    inner: demandkit::ValuationParams,
}

#[pymethods]
impl PyValuation {
    #[new]
    #[pyo3(signature = (mu, sigma, alphas = Vec::new()))]
    fn new(mu: f64, sigma: f64, alphas: Vec<f64>) -> PyResult<Self> {
        Ok(PyValuation {
            inner: demandkit::ValuationParams::new(mu, sigma, alphas).map_err(core_err)?,
        })
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas().to_vec()
    }

    #[getter]
    fn normalizing_constant(&self) -> f64 {
        self.inner.normalizing_constant()
    }

    fn pdf(&self, v: f64) -> f64 {
        self.inner.pdf(v)
    }

    fn cdf(&self, v: f64) -> f64 {
        self.inner.cdf(v)
    }

    fn quantile(&self, u: f64) -> PyResult<f64> {
        self.inner.quantile(u).map_err(core_err)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        self.inner.sample(n, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ValuationParams(mu={}, sigma={}, alphas={:?})",
            self.inner.mu(),
            self.inner.sigma(),
            self.inner.alphas()
        )
    }
}

/// Expected log bids by rank, mixed over the bidder-count distribution.
#[pyclass(name = "StructuralModel", module = "demandkit_py", frozen)]
struct PyModel {
    inner: CoreModel,
    n_min: usize,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_min = 1, n_max = 40, j_max = 5, points = 512))]
    fn new(n_min: usize, n_max: usize, j_max: usize, points: usize) -> PyResult<Self> {
        let grid = BidderGrid::new(n_min, n_max).map_err(core_err)?;
        let q = QuadratureConfig {
            points,
            ..QuadratureConfig::default()
        };
        Ok(PyModel {
            inner: CoreModel::new(grid, j_max, &q, Default::default()).map_err(core_err)?,
            n_min,
        })
    }

    /// Returns `(rank1_advisory, [E log b_2, ..., E log b_jmax])`. `logits`
    /// covers every bidder count in the grid.
    fn predict(&self, py: Python<'_>, valuation: &PyValuation, logits: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let m = MarketSizeParams::new(self.n_min, logits).map_err(core_err)?;
        let p = py.detach(|| self.inner.predict(&valuation.inner, &m)).map_err(core_err)?;
        Ok((p.rank1_advisory, p.expected_log_bids))
    }
}

/// Accuracy row for log-scale predictions against log-scale targets.
#[pyfunction]
#[pyo3(signature = (pred_log, target_log, hit_tolerance = 0.10))]
fn compute_metrics(pred_log: Vec<f64>, target_log: Vec<f64>, hit_tolerance: f64) -> PyResult<HashMap<&'static str, f64>> {
    let m = core_metrics(&pred_log, &target_log, hit_tolerance).map_err(core_err)?;
    Ok(HashMap::from([
        ("n", m.n as f64),
        ("rmse_log", m.rmse_log),
        ("r2", m.r2),
        ("mape", m.mape_pct),
        ("mdape", m.mdape_pct),
        ("hit", m.hit_pct),
        ("bias", m.bias_pct),
    ]))
}

/// Reads a `DEV v1` embedding file into `{listing_id: vector}`.
#[pyfunction]
fn load_embeddings(path: PathBuf) -> PyResult<HashMap<String, Vec<f64>>> {
    let table = load_external_embeddings(&path).map_err(core_err)?;
    Ok(table.into_map().into_iter().map(|(k, v)| (k, v.into_values())).collect())
}

/// Resolved run configuration, parsed from TOML text.
#[pyclass(name = "RunConfig", module = "demandkit_py")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", out = None))]
    fn new(toml: &str, out: Option<PathBuf>) -> PyResult<Self> {
        let mut inner = RunConfig::from_toml_str(toml).map_err(cli_err)?;
        if let Some(o) = out {
            inner.out = o;
        }
        Ok(PyConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out(&self) -> String {
        self.inner.out.display().to_string()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
    }

    fn to_toml(&self) -> String {
        self.inner.canonical()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<String>> {
    py.detach(|| commands::cmd_simulate(&config.inner)).map(paths).map_err(cli_err)
}

/// `stage` is one of `stage1`, `stage2`, `direct`.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, stage: &str) -> PyResult<Vec<String>> {
    let mode = match stage {
        "stage1" => TrainMode::Stage1,
        "stage2" => TrainMode::Stage2,
        "direct" => TrainMode::Direct,
        other => return Err(ConfigError::new_err(format!("unknown stage {other:?}"))),
    };
    py.detach(|| commands::cmd_train(&config.inner, mode)).map(paths).map_err(cli_err)
}

#[pyfunction]
#[pyo3(signature = (config, models = None))]
fn evaluate(py: Python<'_>, config: &PyConfig, models: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let models = match models {
        Some(m) => m.iter().map(|s| ModelKind::parse(s)).collect::<Result<Vec<_>, _>>().map_err(cli_err)?,
        None => config.inner.evaluation.models.clone(),
    };
    py.detach(|| commands::cmd_evaluate(&config.inner, &models)).map(paths).map_err(cli_err)
}

#[pyfunction]
#[pyo3(signature = (config, listings = None, target = None))]
fn attribute(py: Python<'_>, config: &PyConfig, listings: Option<Vec<String>>, target: Option<String>) -> PyResult<Vec<String>> {
    let listings = listings.unwrap_or_else(|| config.inner.attribution.listings.clone());
    let target = target.unwrap_or_else(|| config.inner.attribution.target.clone());
    py.detach(|| commands::cmd_attribute(&config.inner, &listings, &target)).map(paths).map_err(cli_err)
}

#[pyfunction]
#[pyo3(signature = (config, oracle = false))]
fn sweep(py: Python<'_>, config: &PyConfig, oracle: bool) -> PyResult<Vec<String>> {
    let model = if oracle { SweepModel::Oracle } else { config.inner.sweep.model };
    py.detach(|| commands::cmd_sweep(&config.inner, model)).map(paths).map_err(cli_err)
}

#[pyfunction]
fn ols(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<String>> {
    py.detach(|| commands::cmd_ols(&config.inner)).map(paths).map_err(cli_err)
}

#[pymodule]
fn demandkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", demandkit::VERSION)?;
    m.add("DemandkitError", m.py().get_type::<DemandkitError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyValuation>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(ols, m)?)?;
    Ok(())
}
