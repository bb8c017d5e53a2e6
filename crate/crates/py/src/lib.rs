//! Python bindings: datasets, partitions, configs, round-by-round
//! simulation and whole experiments.

use std::collections::BTreeMap;

use htfl_cli::config::{resolve_text, RunConfig as CoreRunConfig};
use htfl_cli::CliError;
use htfl_core::data::{
    gen_gaussian_mixture, gen_har_like, ingest_csv, partition as core_partition, CsvSchema, Dataset as CoreDataset,
    HarLikeConfig, PartitionResult, ScenarioKind, ScenarioSpec,
};
use htfl_core::engine::{run_experiment_with, Simulation as CoreSimulation};
use htfl_core::methods::{local_steps as core_local_steps, MethodKind};
use htfl_core::metrics::{detect_convergence as core_detect, RoundReport as CoreRoundReport};
use htfl_core::modelzoo::BUILTIN_GROUPS;
use htfl_core::HtflError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn core_err(e: HtflError) -> PyErr {
    match e {
        HtflError::InvalidArgument(_)
        | HtflError::Unknown { .. }
        | HtflError::Inapplicable { .. }
        | HtflError::Infeasible(_)
        | HtflError::Shape { .. }
        | HtflError::LabelOutOfRange { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(m) => PyValueError::new_err(m),
        CliError::Runtime(m) => PyRuntimeError::new_err(m),
    }
}

/// Labelled samples with an optional per-sample group id.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn feature_dims(&self) -> usize {
        self.inner.feature_dims()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn sample(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("sample {i} out of range")));
        }
        Ok(self.inner.sample(i).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, classes={}, dims={})",
            self.inner.len(),
            self.inner.num_classes(),
            self.inner.feature_dims()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (classes, samples, dims, sep, seed=0))]
fn gaussian_mixture(classes: usize, samples: usize, dims: usize, sep: f64, seed: u64) -> PyResult<Dataset> {
    gen_gaussian_mixture(classes, samples, dims, sep, seed)
        .map(|inner| Dataset { inner })
        .map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (seed=0, classes=6, subjects=30, samples=3000, channels=9, length=128))]
fn har_like(
    seed: u64,
    classes: usize,
    subjects: usize,
    samples: usize,
    channels: usize,
    length: usize,
) -> PyResult<Dataset> {
    let cfg = HarLikeConfig {
        classes,
        subjects,
        samples,
        channels,
        length,
        ..Default::default()
    };
    gen_har_like(&cfg, seed).map(|inner| Dataset { inner }).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (path, label_col="label", group_col=None, standardize=true))]
fn load_csv(path: &str, label_col: &str, group_col: Option<String>, standardize: bool) -> PyResult<Dataset> {
    let schema = CsvSchema {
        group_col,
        standardize,
        ..CsvSchema::new(label_col)
    };
    ingest_csv(path, &schema).map(|inner| Dataset { inner }).map_err(core_err)
}

/// Per-client train/test index lists.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Partition {
    inner: PartitionResult,
}

#[pymethods]
impl Partition {
    #[getter]
    fn n_clients(&self) -> usize {
        self.inner.n_clients()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.describe()
    }

    fn train(&self, client: usize) -> PyResult<Vec<usize>> {
        self.inner
            .client_train
            .get(client)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("client {client} out of range")))
    }

    fn test(&self, client: usize) -> PyResult<Vec<usize>> {
        self.inner
            .client_test
            .get(client)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("client {client} out of range")))
    }

    fn histograms(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.inner.class_histograms(&dataset.inner)
    }

    /// The plain-text partition file the CLI reads and writes.
    fn to_text(&self) -> String {
        htfl_cli::partition_file::write_partition(&self.inner)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        htfl_cli::partition_file::parse_partition(text)
            .map(|inner| Self { inner })
            .map_err(cli_err)
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, kind, n_clients, seed=0, alpha=0.1, classes_per_client=2, shift_domains=1))]
fn partition(
    dataset: &Dataset,
    kind: &str,
    n_clients: usize,
    seed: u64,
    alpha: f64,
    classes_per_client: usize,
    shift_domains: usize,
) -> PyResult<Partition> {
    let kind = match kind {
        "dirichlet" => ScenarioKind::Dirichlet,
        "pathological" => ScenarioKind::Pathological,
        "feature_shift" => ScenarioKind::FeatureShift,
        "real_world" => ScenarioKind::RealWorld,
        other => return Err(PyValueError::new_err(format!("unknown scenario `{other}`"))),
    };
    let spec = ScenarioSpec {
        kind,
        alpha,
        classes_per_client,
        shift_domains,
        n_clients,
        ..Default::default()
    };
    core_partition(&dataset.inner, &spec, seed)
        .map(|inner| Partition { inner })
        .map_err(core_err)
}

/// Full run configuration; the same keys as the CLI's TOML file.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    /// Starts from `toml` (or the defaults) and applies dotted-key
    /// `overrides` such as `{"experiment.rounds": 20}`.
    #[new]
    #[pyo3(signature = (toml=None, overrides=None))]
    fn new(toml: Option<&str>, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let pairs = overrides
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| Ok((k, literal(&v)?)))
            .collect::<PyResult<Vec<_>>>()?;
        resolve_text(toml.map(|t| ("<config>", t)), &pairs, None)
            .map(|inner| Self { inner })
            .map_err(cli_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.experiment.method.method.name()
    }

    #[getter]
    fn n_clients(&self) -> usize {
        self.inner.experiment.n_clients
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.experiment.rounds
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.experiment.seed
    }

    /// The dataset described by the `[dataset]` section.
    fn dataset(&self) -> PyResult<Dataset> {
        self.inner.dataset.load().map(|inner| Dataset { inner }).map_err(cli_err)
    }
}

/// Renders a Python value as the TOML literal the config parser expects.
fn literal(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(i.to_string());
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(format!("{f:?}"));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(format!("{s:?}"));
    }
    if let Ok(items) = v.extract::<Vec<Bound<'_, PyAny>>>() {
        let parts = items.iter().map(literal).collect::<PyResult<Vec<_>>>()?;
        return Ok(format!("[{}]", parts.join(", ")));
    }
    Err(PyValueError::new_err(format!("unsupported override value {v}")))
}

/// Metrics of one finished round.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct RoundReport {
    round: usize,
    avg_accuracy: Option<f64>,
    unweighted_avg_accuracy: Option<f64>,
    per_client_accuracy: Vec<f64>,
    upload_bytes: u64,
    download_bytes: u64,
    client_seconds: f64,
    server_seconds: f64,
}

impl From<&CoreRoundReport> for RoundReport {
    fn from(r: &CoreRoundReport) -> Self {
        Self {
            round: r.round,
            avg_accuracy: r.avg_accuracy,
            unweighted_avg_accuracy: r.unweighted_avg_accuracy,
            per_client_accuracy: r.per_client_accuracy.clone(),
            upload_bytes: r.upload_bytes,
            download_bytes: r.download_bytes,
            client_seconds: r.client_seconds,
            server_seconds: r.server_seconds,
        }
    }
}

#[pymethods]
impl RoundReport {
    fn __repr__(&self) -> String {
        let acc = self.avg_accuracy.map_or("None".to_string(), |a| format!("{a:.4}"));
        format!(
            "RoundReport(round={}, avg_accuracy={acc}, upload_bytes={}, download_bytes={})",
            self.round, self.upload_bytes, self.download_bytes
        )
    }
}

/// One federated run driven a round at a time.
#[pyclass(unsendable)]
pub struct Simulation {
    inner: CoreSimulation,
}

#[pymethods]
impl Simulation {
    /// Partitions `dataset` (default: the config's) with the config seed
    /// unless `partition` is given.
    #[new]
    #[pyo3(signature = (config, dataset=None, partition=None))]
    fn new(config: &RunConfig, dataset: Option<&Dataset>, partition: Option<&Partition>) -> PyResult<Self> {
        let owned;
        let ds = match dataset {
            Some(d) => &d.inner,
            None => {
                owned = config.inner.dataset.load().map_err(cli_err)?;
                &owned
            }
        };
        let spec = &config.inner.experiment;
        let part = match partition {
            Some(p) => p.inner.clone(),
            None => core_partition(ds, &spec.scenario_for_run(), spec.seed).map_err(core_err)?,
        };
        CoreSimulation::new(spec, ds, &part, spec.seed)
            .map(|inner| Self { inner })
            .map_err(core_err)
    }

    fn run_round(&mut self) -> PyResult<RoundReport> {
        self.inner.run_round().map(|r| RoundReport::from(&r)).map_err(core_err)
    }

    #[getter]
    fn rounds_done(&self) -> usize {
        self.inner.rounds_done()
    }

    #[getter]
    fn group(&self) -> String {
        self.inner.group().name.clone()
    }
}

/// Runs every repeat; returns per-repeat round reports and the summary
/// as `{metric: (mean, std, best)}`.
#[pyfunction]
#[pyo3(signature = (config, dataset=None))]
fn run_experiment(
    config: &RunConfig,
    dataset: Option<&Dataset>,
) -> PyResult<(Vec<Vec<RoundReport>>, BTreeMap<String, (f64, f64, f64)>)> {
    let owned;
    let ds = match dataset {
        Some(d) => &d.inner,
        None => {
            owned = config.inner.dataset.load().map_err(cli_err)?;
            &owned
        }
    };
    let res = run_experiment_with(&config.inner.experiment, ds, None, |_, _| Ok(())).map_err(core_err)?;
    let reports = res
        .reports
        .iter()
        .map(|s| s.iter().map(RoundReport::from).collect())
        .collect();
    let summary = res
        .summary
        .iter()
        .map(|r| (r.metric.clone(), (r.stat.mean, r.stat.std, r.stat.best)))
        .collect();
    Ok((reports, summary))
}

#[pyfunction]
fn local_steps(k: usize, epochs: usize) -> usize {
    core_local_steps(k, epochs)
}

/// 1-based round at which the smoothed series first reaches
/// `threshold` of its maximum.
#[pyfunction]
#[pyo3(signature = (series, window=10, threshold=0.99))]
fn detect_convergence(series: Vec<f64>, window: usize, threshold: f64) -> PyResult<usize> {
    core_detect(&series, window, threshold)
        .map(|s| s.converged_round)
        .map_err(core_err)
}

#[pyfunction]
fn methods() -> Vec<&'static str> {
    MethodKind::ALL.iter().map(|m| m.name()).collect()
}

#[pyfunction]
fn groups() -> Vec<&'static str> {
    BUILTIN_GROUPS.to_vec()
}

#[pyfunction]
fn default_config() -> String {
    CoreRunConfig::default().to_toml()
}

#[pymodule]
pub fn htfl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Partition>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<RoundReport>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(gaussian_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(har_like, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(local_steps, m)?)?;
    m.add_function(wrap_pyfunction!(detect_convergence, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(groups, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
