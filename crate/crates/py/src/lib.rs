//! Python bindings. Values cross the boundary as plain dicts and lists
//! (JSON-compatible), mirroring the CLI and HTTP payloads.

use std::path::PathBuf;
use std::sync::Arc;

use errsight_core::engine::embedder_from_config;
use errsight_core::model::{annotated_corpus, load_corpus, read_jsonl};
use errsight_core::{
    Backends, ChatRequest, ChatResponse, Embedder, Engine, EngineConfig, Error, ErrorAnnotation, EvalMode, Feedback,
    FnBackend, HashedEmbedder, Trajectory, TrajectoryFormat,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(errsight, ErrsightError, PyException, "Engine error; args are (kind, message).");

fn py_err(e: Error) -> PyErr {
    ErrsightError::new_err((e.kind(), e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| py_err(Error::Internal(e.to_string())))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| py_err(Error::SchemaViolation(e.to_string())))
}

fn parse_format(format: &str) -> PyResult<TrajectoryFormat> {
    match format {
        "canonical" => Ok(TrajectoryFormat::CanonicalJson),
        "who-when" | "who_when" => Ok(TrajectoryFormat::WhoWhenJson),
        other => Err(py_err(Error::InvalidInput(format!("unknown format {other:?}")))),
    }
}

fn parse_mode(mode: &str) -> PyResult<EvalMode> {
    mode.parse().map_err(py_err)
}

/// Chat backend that hands each request, as a dict, to a Python callable
/// returning the reply text.
fn callable_backend(model: &str, f: Py<PyAny>) -> FnBackend {
    FnBackend::new(model, move |req: &ChatRequest| {
        Python::attach(|py| {
            let arg = to_py(py, req).map_err(|e| Error::BackendUnavailable { status: None, message: e.to_string() })?;
            let out = f.call1(py, (arg,)).and_then(|r| r.extract::<String>(py));
            out.map(ChatResponse::stop)
                .map_err(|e| Error::BackendUnavailable { status: None, message: format!("python backend: {e}") })
        })
    })
}

#[pyclass(name = "Engine", module = "errsight", frozen)]
struct PyEngine {
    inner: Arc<Engine>,
}

fn corpus(
    path: PathBuf,
    annotations: Option<PathBuf>,
    format: &str,
    cfg: &EngineConfig,
) -> PyResult<Vec<(Trajectory, ErrorAnnotation)>> {
    let parsed = load_corpus(&path, parse_format(format)?, cfg.step_base).map_err(py_err)?;
    let anns = annotations.map(|p| read_jsonl::<ErrorAnnotation>(&p)).transpose().map_err(py_err)?;
    annotated_corpus(parsed, anns).map_err(py_err)
}

#[pymethods]
impl PyEngine {
    /// `config` is a dict of config keys, `config_path` a TOML file; keys in
    /// `config` win. With `chat`, every model call goes to that callable.
    #[new]
    #[pyo3(signature = (config=None, config_path=None, chat=None))]
    fn new(
        config: Option<&Bound<'_, PyAny>>,
        config_path: Option<PathBuf>,
        chat: Option<Py<PyAny>>,
    ) -> PyResult<Self> {
        let mut cfg = match &config_path {
            Some(p) => EngineConfig::load(p).map_err(py_err)?,
            None => EngineConfig::default(),
        };
        if let Some(overrides) = config {
            let mut base = serde_json::to_value(&cfg).map_err(|e| py_err(Error::Internal(e.to_string())))?;
            let extra: serde_json::Map<String, serde_json::Value> = from_py(overrides)?;
            base.as_object_mut().expect("config serializes to an object").extend(extra);
            cfg = serde_json::from_value(base).map_err(|e| py_err(Error::Config(e.to_string())))?;
        }
        cfg.check().map_err(py_err)?;
        let engine = match chat {
            Some(f) => {
                let embedder = embedder_from_config(&cfg).map_err(py_err)?;
                let backend = Arc::new(callable_backend(&cfg.chat_model, f));
                Engine::open_with(cfg, Backends::uniform(backend), embedder)
            }
            None => Engine::open(cfg),
        }
        .map_err(py_err)?;
        Ok(PyEngine { inner: Arc::new(engine) })
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Builds the schema store from an annotated corpus and persists it.
    #[pyo3(signature = (corpus_path, annotations_path=None, format="canonical", threshold=None))]
    fn extract(
        &self,
        py: Python<'_>,
        corpus_path: PathBuf,
        annotations_path: Option<PathBuf>,
        format: &str,
        threshold: Option<f64>,
    ) -> PyResult<Py<PyAny>> {
        let data = corpus(corpus_path, annotations_path, format, self.inner.config())?;
        let engine = self.inner.clone();
        let report = py.detach(move || engine.extract(&data, threshold)).map_err(py_err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (trajectory, k=None))]
    fn recognize(&self, py: Python<'_>, trajectory: &Bound<'_, PyAny>, k: Option<usize>) -> PyResult<Py<PyAny>> {
        let t: Trajectory = from_py(trajectory)?;
        let k = k.unwrap_or(self.inner.config().k);
        if k == 0 {
            return Err(py_err(Error::InvalidInput("k must be >= 1".into())));
        }
        let engine = self.inner.clone();
        let r = py.detach(move || engine.recognize_detailed(&t, k)).map_err(py_err)?;
        to_py(py, &r.diagnosis)
    }

    fn feedback(&self, py: Python<'_>, feedback: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let fb: Feedback = from_py(feedback)?;
        let engine = self.inner.clone();
        let out = py.detach(move || engine.feedback(fb)).map_err(py_err)?;
        to_py(py, &out)
    }

    /// Returns `{"report": ..., "records": [...]}`.
    #[pyo3(signature = (corpus_path, annotations_path=None, mode="schema-guided", runs=1, format="canonical"))]
    fn evaluate(
        &self,
        py: Python<'_>,
        corpus_path: PathBuf,
        annotations_path: Option<PathBuf>,
        mode: &str,
        runs: usize,
        format: &str,
    ) -> PyResult<Py<PyAny>> {
        let data = corpus(corpus_path, annotations_path, format, self.inner.config())?;
        let mode = parse_mode(mode)?;
        let engine = self.inner.clone();
        let out = py.detach(move || engine.evaluate(&data, mode, runs)).map_err(py_err)?;
        to_py(py, &serde_json::json!({"report": out.report, "records": out.records}))
    }

    fn schemas(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.schemas())
    }

    fn schema(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.schema(id).map_err(py_err)?)
    }

    fn health(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.health())
    }

    fn persist(&self) -> PyResult<()> {
        self.inner.persist().map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.cache().len()
    }
}

/// Hashed bag-of-words embedding of `text`.
#[pyfunction]
#[pyo3(signature = (text, dim=256))]
fn embed(text: &str, dim: usize) -> PyResult<Vec<f64>> {
    if dim == 0 {
        return Err(py_err(Error::InvalidInput("dim must be >= 1".into())));
    }
    Ok(HashedEmbedder::new(dim).embed(text).map_err(py_err)?.values().to_vec())
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let wrap = |v| errsight_core::EmbeddingVector::new(v, "py");
    errsight_core::cosine(&wrap(a).map_err(py_err)?, &wrap(b).map_err(py_err)?).map_err(py_err)
}

/// Loads trajectories as dicts; `format` is `canonical` or `who-when`.
#[pyfunction]
#[pyo3(signature = (path, format="canonical", one_based=false))]
fn load_trajectories(py: Python<'_>, path: PathBuf, format: &str, one_based: bool) -> PyResult<Py<PyAny>> {
    let base = if one_based { errsight_core::StepBase::OneBased } else { errsight_core::StepBase::ZeroBased };
    let parsed = load_corpus(&path, parse_format(format)?, base).map_err(py_err)?;
    let ts: Vec<&Trajectory> = parsed.iter().map(|p| &p.trajectory).collect();
    to_py(py, &ts)
}

#[pymodule]
#[pyo3(name = "errsight")]
pub fn errsight_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add("ErrsightError", m.py().get_type::<ErrsightError>())?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(load_trajectories, m)?)?;
    Ok(())
}
