//! Python bindings: configuration, teacher pretraining, distillation runs,
//! checkpoint inspection and the loss/divergence helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mad_core::config::{Config, Method};
use mad_core::data::Dataset;
use mad_core::diag::{self, JsProbeConfig};
use mad_core::diffcore::{softmax_rows, BnMode, RngState, Stream, Tensor};
use mad_core::losses;
use mad_core::models::{ClassifierNet, EmbeddingTable, GeneratorNet};
use mad_core::trainer::{self, MemoryBank};
use mad_core::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Run configuration; keys and values follow the config-file syntax.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::preset(preset).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::load(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::parse_str(text).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_resolved(&self) -> String {
        self.inner.to_resolved(&[])
    }

    fn __repr__(&self) -> String {
        format!("Config(preset={:?}, method={})", self.inner.preset, self.inner.distill.method)
    }
}

/// Classification network (teacher or student).
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: ClassifierNet,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier {
            inner: ClassifierNet::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.inner.d_in()
    }

    /// Eval-mode logits for a batch given as a list of rows.
    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = to_tensor(x)?;
        Ok(to_rows(&self.inner.logits(&t, BnMode::Eval).map_err(py_err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let t = to_tensor(x)?;
        let logits = self.inner.logits(&t, BnMode::Eval).map_err(py_err)?;
        Ok(logits.iter_rows().map(diag::argmax).collect())
    }

    /// `(accuracy, cross_entropy)` on the held-out split of `config`'s dataset.
    fn evaluate(&self, config: &PyConfig) -> PyResult<(f64, f64)> {
        let (_, test) = trainer::datasets(&config.inner.data).map_err(py_err)?;
        let e = diag::evaluate(&self.inner, &test).map_err(py_err)?;
        Ok((e.accuracy, e.cross_entropy))
    }
}

/// Generator checkpoint, optionally with its class embedding table.
#[pyclass(name = "Generator")]
struct PyGenerator {
    net: GeneratorNet,
    table: Option<EmbeddingTable>,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    #[pyo3(signature = (path, embeddings = None))]
    fn load(path: PathBuf, embeddings: Option<PathBuf>) -> PyResult<Self> {
        let net = GeneratorNet::load(&path).map_err(py_err)?;
        let table = embeddings.map(|p| EmbeddingTable::load(&p)).transpose().map_err(py_err)?;
        if net.conditioning.is_conditional() != table.is_some() {
            return Err(PyValueError::new_err(format!(
                "{} generator {} an embedding table",
                net.conditioning,
                if table.is_some() { "does not take" } else { "needs" }
            )));
        }
        Ok(PyGenerator { net, table })
    }

    #[getter]
    fn d_z(&self) -> usize {
        self.net.d_z
    }

    #[getter]
    fn conditioning(&self) -> String {
        self.net.conditioning.to_string()
    }

    /// Samples in eval-mode BatchNorm; `labels` are 0-based and required for
    /// conditional generators.
    #[pyo3(signature = (n, seed = 0, labels = None))]
    fn sample(&self, n: usize, seed: u64, labels: Option<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = RngState::new(seed, Stream::Export);
        let labels = match (&self.table, labels) {
            (Some(_), Some(y)) if y.len() == n => Some(y),
            (Some(_), Some(y)) => {
                return Err(PyValueError::new_err(format!("{} labels for {n} samples", y.len())))
            }
            (Some(t), None) => Some(rng.fork(1).labels(n, t.classes())),
            (None, Some(_)) => return Err(PyValueError::new_err("unconditional generator takes no labels")),
            (None, None) => None,
        };
        let z = rng.normal_tensor(&[n, self.net.d_z]);
        let (_, x) = self
            .net
            .generate(self.table.as_ref(), &z, labels.as_deref(), BnMode::Eval)
            .map_err(py_err)?;
        Ok(to_rows(&x))
    }
}

/// FIFO bank of synthetic samples.
#[pyclass(name = "MemoryBank")]
struct PyMemoryBank {
    inner: MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    #[new]
    fn new(capacity: usize, width: usize) -> PyResult<Self> {
        Ok(PyMemoryBank {
            inner: MemoryBank::new(capacity, width).map_err(py_err)?,
        })
    }

    fn push(&mut self, rows: Vec<Vec<f64>>) -> PyResult<()> {
        self.inner.push(&to_tensor(rows)?).map_err(py_err)
    }

    fn contents(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.contents())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Trains a teacher on `config`'s dataset and writes `teacher.ckpt` under `out`.
/// Returns the held-out accuracy.
#[pyfunction]
fn pretrain_teacher(config: &PyConfig, out: PathBuf) -> PyResult<f64> {
    let cfg = &config.inner;
    let (train, test) = trainer::datasets(&cfg.data).map_err(py_err)?;
    let (net, report) = trainer::pretrain_teacher(
        &train,
        &test,
        &cfg.teacher,
        cfg.distill.student_loss.logit_bound,
        cfg.distill.seed,
    )
    .map_err(py_err)?;
    std::fs::create_dir_all(&out).map_err(|e| py_err(e.into()))?;
    net.save(&out.join("teacher.ckpt")).map_err(py_err)?;
    std::fs::write(out.join("teacher_log.csv"), report.csv()).map_err(|e| py_err(e.into()))?;
    Ok(report.test.accuracy)
}

/// Runs one distillation and returns a summary dict. `method` overrides the
/// config; `abm` forces `lambda1 = 0`.
#[pyfunction]
#[pyo3(signature = (config, teacher, out, method = None))]
fn distill<'py>(
    py: Python<'py>,
    config: &PyConfig,
    teacher: PathBuf,
    out: PathBuf,
    method: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config.inner.clone();
    let mut notes = Vec::new();
    if let Some(m) = method {
        cfg.distill.method = m.parse::<Method>().map_err(py_err)?;
    }
    if cfg.distill.method == Method::Abm && cfg.distill.student_loss.second != 0.0 {
        notes.push("override: method = abm forces lambda1 = 0".to_string());
        cfg.distill.student_loss.second = 0.0;
    }
    cfg.validate().map_err(py_err)?;
    let (_, test): (Dataset, Dataset) = trainer::datasets(&cfg.data).map_err(py_err)?;
    let s = py
        .detach(|| trainer::run_distillation(&teacher, &test, &cfg, &out, &notes))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("method", s.method.to_string())?;
    d.set_item("seed", s.seed)?;
    d.set_item("stages", s.stages)?;
    d.set_item("teacher_accuracy", s.teacher.accuracy)?;
    d.set_item("final_accuracy", s.final_eval.accuracy)?;
    d.set_item("final_cross_entropy", s.final_eval.cross_entropy)?;
    d.set_item("best_accuracy", s.best_acc)?;
    d.set_item("ema_updates", s.ema_updates)?;
    d.set_item(
        "test_accuracy",
        s.metrics.iter().map(|m| m.test_acc).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// JS probe over a finished run; returns `(t, js_gen, js_ema)` rows.
#[pyfunction]
#[pyo3(signature = (rundir, tau, stages, batches = 4))]
fn js_probe(rundir: PathBuf, tau: usize, stages: Vec<usize>, batches: usize) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
    let cfg = Config::load(&rundir.join(trainer::rundir::CONFIG_FILE)).map_err(py_err)?;
    let probe = JsProbeConfig {
        stages,
        tau,
        batches,
        batch_size: cfg.distill.bs,
    };
    let rows = diag::js_probe(&rundir, &probe).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.t, r.js_gen, r.js_ema)).collect())
}

/// Batch-mean KL(softmax(teacher) ‖ softmax(student)).
#[pyfunction]
fn kd_loss(teacher_logits: Vec<Vec<f64>>, student_logits: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::kd_value(&to_tensor(teacher_logits)?, &to_tensor(student_logits)?).map_err(py_err)
}

/// Mean row-wise Jensen-Shannon divergence (natural log) between probability rows.
#[pyfunction]
fn js_divergence(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::js_divergence(&to_tensor(p)?, &to_tensor(q)?).map_err(py_err)
}

#[pyfunction]
fn softmax(logits: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&softmax_rows(&to_tensor(logits)?)))
}

#[pymodule]
fn mad_distill(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(pretrain_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(js_probe, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    Ok(())
}
