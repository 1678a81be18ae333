//! Python bindings: data generation, training, pool editing, evaluation and
//! the verification suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use taskvec::data::{gen_blobs as core_gen_blobs, BlobSpec};
use taskvec::trainer::{run_sequence as core_run_sequence, Algo};
use taskvec::verify::{run_suite_capped, Suite};
use taskvec::{Error, UnlearnMode, Variant};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_algo(s: &str) -> PyResult<Algo> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(json_err)
}

fn parse_variant(s: &str, rank: Option<usize>) -> PyResult<Variant> {
    match (s.to_lowercase().as_str(), rank) {
        ("fft", None) => Ok(Variant::Fft),
        ("ia3", None) => Ok(Variant::Ia3),
        ("lora", Some(r)) => Ok(Variant::Lora { rank: r }),
        ("lora", None) => Err(PyValueError::new_err("lora needs a rank")),
        (other, _) => Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    }
}

/// A sequence of classification tasks.
#[pyclass(module = "taskvec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct TaskStream {
    inner: taskvec::data::TaskStream,
}

#[pymethods]
impl TaskStream {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn total_classes(&self) -> usize {
        self.inner.total_classes()
    }

    /// `(inputs, labels)` of split `"train"`, `"val"` or `"test"` of task `t`
    /// (1-based).
    fn split(&self, t: usize, split: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let task = t
            .checked_sub(1)
            .and_then(|i| self.inner.tasks().get(i))
            .ok_or_else(|| PyIndexError::new_err(format!("no task {t}")))?;
        let b = match split {
            "train" => &task.train,
            "val" => &task.val,
            "test" => &task.test,
            _ => return Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        };
        let rows = (0..b.len()).map(|i| b.inputs.row(i).to_vec()).collect();
        Ok((rows, b.labels.clone()))
    }

    fn class_range(&self, t: usize) -> PyResult<(usize, usize)> {
        let task = t
            .checked_sub(1)
            .and_then(|i| self.inner.tasks().get(i))
            .ok_or_else(|| PyIndexError::new_err(format!("no task {t}")))?;
        Ok((task.range.start, task.range.end))
    }
}

#[pyfunction]
#[pyo3(signature = (tasks=5, classes_per_task=2, dim=16, samples_per_class=200, spread=0.6, mean_scale=1.0, seed=0))]
fn gen_blobs(
    tasks: usize,
    classes_per_task: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    mean_scale: f64,
    seed: u64,
) -> PyResult<TaskStream> {
    let spec = BlobSpec {
        tasks,
        classes_per_task,
        dim,
        samples_per_class,
        spread,
        mean_scale,
        seed,
    };
    Ok(TaskStream {
        inner: core_gen_blobs(&spec).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (path, label_column, tasks, header=false, seed=0))]
fn load_csv(path: PathBuf, label_column: usize, tasks: usize, header: bool, seed: u64) -> PyResult<TaskStream> {
    Ok(TaskStream {
        inner: taskvec::data::load_csv(&path, label_column, header, tasks, seed).map_err(to_py)?,
    })
}

/// Training hyperparameters.
#[pyclass(module = "taskvec", skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: taskvec::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    /// Paper defaults.
    #[new]
    #[pyo3(signature = (algo="ita", variant="fft", rank=None))]
    fn new(algo: &str, variant: &str, rank: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: taskvec::TrainConfig {
                algo: parse_algo(algo)?,
                variant: parse_variant(variant, rank)?,
                ..Default::default()
            },
        })
    }

    /// Settings tuned for the blob benchmark.
    #[staticmethod]
    #[pyo3(signature = (algo="ita", variant="fft", rank=None))]
    fn desk(algo: &str, variant: &str, rank: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: taskvec::TrainConfig::desk(parse_algo(algo)?, parse_variant(variant, rank)?),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: taskvec::TrainConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }
    #[setter]
    fn set_lr(&mut self, v: f64) {
        self.inner.lr = v;
    }
    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn alpha(&self) -> (f64, f64) {
        (self.inner.reg.alpha, self.inner.reg.alpha_cls)
    }
    /// `(alpha, alpha_cls)`.
    #[setter]
    fn set_alpha(&mut self, v: (f64, f64)) {
        (self.inner.reg.alpha, self.inner.reg.alpha_cls) = v;
    }
    #[getter]
    fn beta(&self) -> (f64, f64) {
        (self.inner.reg.beta, self.inner.reg.beta_cls)
    }
    /// `(beta, beta_cls)`.
    #[setter]
    fn set_beta(&mut self, v: (f64, f64)) {
        (self.inner.reg.beta, self.inner.reg.beta_cls) = v;
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.to_json())
    }
}

/// Flat parameter vector with its network.
#[pyclass(module = "taskvec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Params {
    net: taskvec::Network,
    theta: taskvec::ParamVector,
}

#[pymethods]
impl Params {
    fn __len__(&self) -> usize {
        self.theta.len()
    }

    fn values(&self) -> Vec<f64> {
        self.theta.values().to_vec()
    }

    fn norm(&self) -> f64 {
        self.theta.norm()
    }

    /// Global-softmax test accuracy on task `t` (1-based) of `stream`.
    fn accuracy(&self, stream: &TaskStream, t: usize) -> PyResult<f64> {
        let task = t
            .checked_sub(1)
            .and_then(|i| stream.inner.tasks().get(i))
            .ok_or_else(|| PyIndexError::new_err(format!("no task {t}")))?;
        self.net.accuracy(&self.theta, &task.test).map_err(to_py)
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = taskvec::linalg::Matrix::from_rows(&inputs);
        self.net.predict(&self.theta, &x).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        taskvec::io::save_params(&path, &self.net, &self.theta).map_err(to_py)
    }
}

/// Base weights plus the task vectors learned so far.
#[pyclass(module = "taskvec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Pool {
    net: taskvec::Network,
    pool: taskvec::PoolState,
    fisher: Option<taskvec::FisherDiagonal>,
}

impl Pool {
    fn wrap(&self, theta: taskvec::ParamVector) -> Params {
        Params { net: self.net, theta }
    }
}

#[pymethods]
impl Pool {
    fn __len__(&self) -> usize {
        self.pool.count()
    }

    fn weights(&self) -> Vec<f64> {
        self.pool.weights()
    }

    fn base(&self) -> Params {
        self.wrap(self.pool.theta0().clone())
    }

    #[pyo3(signature = (weights=None))]
    fn compose(&self, weights: Option<Vec<f64>>) -> PyResult<Params> {
        Ok(self.wrap(self.pool.compose(weights.as_deref()).map_err(to_py)?))
    }

    /// Composition of the given 1-based task ids only.
    fn specialize(&self, tasks: Vec<usize>) -> PyResult<Params> {
        Ok(self.wrap(self.pool.edit_specialize(&tasks).map_err(to_py)?))
    }

    /// Composition without task `task`; `raw` subtracts its weighted vector
    /// instead of renormalizing.
    #[pyo3(signature = (task, raw=false))]
    fn unlearn(&self, task: usize, raw: bool) -> PyResult<Params> {
        let mode = if raw { UnlearnMode::Subtract } else { UnlearnMode::Renormalize };
        Ok(self.wrap(self.pool.edit_unlearn(task, mode).map_err(to_py)?))
    }

    /// Dense displacement of task `task`.
    fn vector(&self, task: usize) -> PyResult<Vec<f64>> {
        Ok(self.pool.materialized(task).map_err(to_py)?.to_vec())
    }

    fn fisher(&self) -> Option<Vec<f64>> {
        self.fisher.as_ref().map(|f| f.values().to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        taskvec::io::save_pool(&path, &self.net, &self.pool, self.fisher.as_ref()).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = taskvec::io::load_pool(&path).map_err(to_py)?;
        Ok(Self {
            net: f.network,
            pool: f.pool,
            fisher: f.fisher,
        })
    }
}

/// Metrics of a finished run.
#[pyclass(module = "taskvec", frozen, skip_from_py_object)]
struct RunResult {
    inner: taskvec::RunResult,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn fa(&self) -> f64 {
        self.inner.fa
    }
    #[getter]
    fn ff(&self) -> f64 {
        self.inner.ff
    }
    /// Lower-triangular accuracy matrix, one row per finished task.
    #[getter]
    fn acc(&self) -> Vec<Vec<f64>> {
        self.inner.acc.rows().to_vec()
    }
    #[getter]
    fn individual_acc(&self) -> Vec<f64> {
        self.inner.individual_acc.clone()
    }
    #[getter]
    fn probe_acc(&self) -> Vec<f64> {
        self.inner.probe_acc.clone()
    }
    /// `(after_task, composed, upper_bound, base)` per task boundary.
    #[getter]
    fn risk(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner
            .risk
            .iter()
            .map(|r| (r.after_task, r.composed, r.upper_bound, r.base))
            .collect()
    }
    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("result serializes")
    }
}

/// Trains every task of `stream` in order.
#[pyfunction]
fn run_sequence(py: Python<'_>, stream: &TaskStream, config: &TrainConfig) -> PyResult<(Pool, RunResult)> {
    let (s, c) = (stream.inner.clone(), config.inner.clone());
    let (runner, result) = py.detach(move || core_run_sequence(&s, &c)).map_err(to_py)?;
    let (pool, fisher, net) = runner.into_parts();
    Ok((
        Pool {
            net,
            pool,
            fisher: Some(fisher),
        },
        RunResult { inner: result },
    ))
}

/// Runs a verification suite; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (suite="all", seed=0))]
fn verify<'py>(py: Python<'py>, suite: &str, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let suite: Suite = suite.parse().map_err(to_py)?;
    let reports = py.detach(move || run_suite_capped(suite, seed)).map_err(to_py)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("check", r.check)?;
            d.set_item("instances", r.instances)?;
            d.set_item("max_residual", r.max_residual)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("pass", r.pass)?;
            d.set_item("worst_seed", r.worst_seed)?;
            Ok(d)
        })
        .collect()
}

fn as_refs(taus: &[Vec<f64>]) -> Vec<&[f64]> {
    taus.iter().map(Vec::as_slice).collect()
}

/// Fisher-weighted disagreement of the task vectors, expanded form.
#[pyfunction]
fn omega_value(taus: Vec<Vec<f64>>, weights: Vec<f64>, fisher: Vec<f64>) -> PyResult<f64> {
    taskvec::regularizers::omega_value(&as_refs(&taus), &weights, &fisher).map_err(to_py)
}

/// Same quantity as a weighted sum of pairwise distances.
#[pyfunction]
fn omega_pairwise(taus: Vec<Vec<f64>>, weights: Vec<f64>, fisher: Vec<f64>) -> PyResult<f64> {
    taskvec::regularizers::omega_pairwise(&as_refs(&taus), &weights, &fisher).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "taskvec")]
fn taskvec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TaskStream>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Params>()?;
    m.add_class::<Pool>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(gen_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(omega_value, m)?)?;
    m.add_function(wrap_pyfunction!(omega_pairwise, m)?)?;
    Ok(())
}
