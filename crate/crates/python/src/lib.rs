//! Python bindings for the cforge engine.
//!
//! Structured results cross the boundary as plain dicts and lists, built by
//! round-tripping the Rust value through JSON.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use cforge::attrdetect;
use cforge::backends::{self, Backend, MockConfig, MockWorld, ServerHandle};
use cforge::cli::{CliError, Engine, EngineConfig, EngineOptions};
use cforge::domain::{AttributeId, AttributeVector as CoreVector};
use cforge::evalstats;
use cforge::filter::{self, FilterConfig};
use cforge::specmatrix::{self, SpecCode};
use cforge::{distortion, genplan};

create_exception!(cforge_py, CforgeError, PyException);
create_exception!(cforge_py, ConfigError, CforgeError);

fn engine_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(msg) => ConfigError::new_err(msg),
        other => CforgeError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn attribute(name: &str) -> PyResult<AttributeId> {
    name.parse().map_err(value_err)
}

fn flag_map(flags: &BTreeMap<String, bool>) -> PyResult<BTreeMap<AttributeId, bool>> {
    flags.iter().map(|(k, v)| Ok((attribute(k)?, *v))).collect()
}

fn name_map(flags: &BTreeMap<AttributeId, bool>) -> BTreeMap<String, bool> {
    flags.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect()
}

/// Detected attributes of one face: 17 binary flags plus an age estimate.
#[pyclass(module = "cforge_py", skip_from_py_object)]
#[derive(Clone)]
struct AttributeVector {
    inner: CoreVector,
}

#[pymethods]
impl AttributeVector {
    #[new]
    #[pyo3(signature = (age, flags = None))]
    fn new(age: u32, flags: Option<BTreeMap<String, bool>>) -> PyResult<Self> {
        let mut inner = CoreVector::blank(age);
        for (a, v) in flag_map(&flags.unwrap_or_default())? {
            if matches!(a, AttributeId::Old | AttributeId::Young) {
                return Err(PyValueError::new_err(format!("`{a}` is not a binary attribute")));
            }
            inner.set(a, v);
        }
        Ok(AttributeVector { inner })
    }

    #[getter]
    fn age(&self) -> u32 {
        self.inner.age_years
    }

    fn get(&self, name: &str) -> PyResult<bool> {
        Ok(self.inner.get(attribute(name)?))
    }

    fn flags(&self) -> BTreeMap<String, bool> {
        name_map(&self.inner.flags)
    }

    fn __repr__(&self) -> String {
        let on: Vec<&str> = AttributeId::NON_AGE.iter().filter(|a| self.inner.get(**a)).map(|a| a.as_str()).collect();
        format!("AttributeVector(age={}, on=[{}])", self.inner.age_years, on.join(", "))
    }
}

/// Which flag transitions an edit may cause.
#[pyclass(module = "cforge_py", skip_from_py_object)]
#[derive(Clone)]
struct TransitionMatrix {
    inner: specmatrix::TransitionMatrix,
}

#[pymethods]
impl TransitionMatrix {
    #[staticmethod]
    fn default() -> Self {
        TransitionMatrix { inner: specmatrix::default_matrix() }
    }

    #[staticmethod]
    fn strict() -> Self {
        TransitionMatrix { inner: specmatrix::TransitionMatrix::strict() }
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(TransitionMatrix { inner: specmatrix::load_matrix(text).map_err(value_err)? })
    }

    /// Code for (applied, target): 1 present, 0 absent, -1 preserve, -2 ignore.
    fn get(&self, applied: &str, target: &str) -> PyResult<i8> {
        Ok(self.inner.get(attribute(applied)?, attribute(target)?).map_err(value_err)?.code())
    }

    fn set(&mut self, applied: &str, target: &str, code: i8) -> PyResult<()> {
        let code = SpecCode::from_code(code).ok_or_else(|| PyValueError::new_err(format!("bad code {code}")))?;
        self.inner.set(attribute(applied)?, attribute(target)?, code).map_err(value_err)
    }

    fn allows(&self, applied: &str, target: &str, source: bool, transformed: bool) -> PyResult<bool> {
        let code = self.inner.get(attribute(applied)?, attribute(target)?).map_err(value_err)?;
        Ok(code.allows(source, transformed))
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Reasons a candidate pair would be rejected; empty means accepted.
#[pyfunction]
#[pyo3(signature = (source, transformed, applied, distorted = false, matrix = None, age_drift_max = None))]
fn rejection_reasons(
    source: &AttributeVector,
    transformed: &AttributeVector,
    applied: &str,
    distorted: bool,
    matrix: Option<&TransitionMatrix>,
    age_drift_max: Option<u32>,
) -> PyResult<Vec<String>> {
    let mut cfg = FilterConfig::default();
    if let Some(m) = matrix {
        cfg.matrix = m.inner.clone();
    }
    if let Some(d) = age_drift_max {
        cfg.age_drift_max = d;
    }
    cfg.validate().map_err(value_err)?;
    let reasons = filter::rejection_reasons(&source.inner, &transformed.inner, attribute(applied)?, distorted, &cfg);
    Ok(reasons.iter().map(ToString::to_string).collect())
}

#[pyfunction]
fn recall_threshold(distorted_scores: Vec<f64>, target: f64) -> Option<f64> {
    distortion::recall_threshold(&distorted_scores, target)
}

/// Mean and confidence half-width of per-pair deltas.
#[pyfunction]
#[pyo3(signature = (deltas, level = 0.999))]
fn mean_ci(deltas: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    evalstats::mean_ci(&deltas, level).map_err(value_err)
}

#[pyfunction]
fn t_critical(level: f64, df: f64) -> f64 {
    evalstats::t_critical(level, df)
}

#[pyfunction]
fn sig2(x: f64) -> String {
    evalstats::sig2(x)
}

#[pyfunction]
fn render_prompt(name: &str) -> String {
    genplan::render_prompt(name)
}

#[pyfunction]
fn render_attribute_response(source: BTreeMap<String, bool>, transformed: BTreeMap<String, bool>) -> PyResult<String> {
    Ok(attrdetect::render_attribute_response(&flag_map(&source)?, &flag_map(&transformed)?))
}

/// Parse a detector answer into (source flags, transformed flags).
#[pyfunction]
#[allow(clippy::type_complexity)]
fn parse_attribute_response(raw: &str) -> PyResult<(BTreeMap<String, bool>, BTreeMap<String, bool>)> {
    let (s, t) = attrdetect::parse_attribute_response(raw, &AttributeId::NON_AGE).map_err(value_err)?;
    Ok((name_map(&s), name_map(&t)))
}

#[pyfunction]
fn attributes() -> Vec<&'static str> {
    AttributeId::ALL.iter().map(|a| a.as_str()).collect()
}

/// The deterministic mock backend served over HTTP.
#[pyclass(module = "cforge_py", unsendable)]
struct MockServer {
    handle: Option<ServerHandle>,
    url: String,
}

#[pymethods]
impl MockServer {
    #[new]
    #[pyo3(signature = (seed = 0, addr = "127.0.0.1:0", threads = 4))]
    fn new(seed: u64, addr: &str, threads: usize) -> PyResult<Self> {
        let world = Arc::new(MockWorld::new(MockConfig { seed, ..MockConfig::default() }));
        let handle = backends::serve(world as Arc<dyn Backend>, addr, threads)
            .map_err(|e| CforgeError::new_err(e.to_string()))?;
        let url = handle.base_url();
        Ok(MockServer { handle: Some(handle), url })
    }

    #[getter]
    fn base_url(&self) -> String {
        self.url.clone()
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            h.shutdown();
        }
    }

    fn __enter__(slf: PyRef<'_, Self>) -> PyRef<'_, Self> {
        slf
    }

    fn __exit__(&mut self, _exc_type: Py<PyAny>, _exc: Py<PyAny>, _tb: Py<PyAny>) {
        self.shutdown();
    }
}

/// An opened run directory. Stage methods mirror the CLI subcommands.
#[pyclass(module = "cforge_py", unsendable)]
struct Pipeline {
    engine: Engine,
}

#[pymethods]
impl Pipeline {
    /// `config` is a path to a JSON config file or a JSON string; `seed`
    /// overrides the master seed.
    #[new]
    #[pyo3(signature = (run_dir, config = None, *, mock = false, jobs = 4, strict = false, seed = None))]
    fn new(
        run_dir: PathBuf,
        config: Option<&str>,
        mock: bool,
        jobs: usize,
        strict: bool,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut cfg = match config {
            None => EngineConfig::default(),
            Some(text) if text.trim_start().starts_with('{') => {
                serde_json::from_str(text).map_err(|e| ConfigError::new_err(e.to_string()))?
            }
            Some(path) => EngineConfig::load(std::path::Path::new(path)).map_err(engine_err)?,
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        let engine = Engine::open(run_dir, cfg, &EngineOptions { mock, jobs, strict }).map_err(engine_err)?;
        Ok(Pipeline { engine })
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.engine.run_dir.clone()
    }

    fn plan(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.plan().map_err(engine_err)?)
    }

    fn generate(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.generate().map_err(engine_err)?)
    }

    fn edit(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.edit().map_err(engine_err)?)
    }

    fn detect(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.detect().map_err(engine_err)?)
    }

    fn calibrate(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.calibrate().map_err(engine_err)?)
    }

    fn filter(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.filter().map_err(engine_err)?)
    }

    fn validate_identities(&mut self, checklist: PathBuf) -> PyResult<usize> {
        self.engine.validate_identities(&checklist).map_err(engine_err)
    }

    #[pyo3(signature = (cap = None, force = false))]
    fn sample_for_survey(&self, py: Python<'_>, cap: Option<usize>, force: bool) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.sample_for_survey(cap, force).map_err(engine_err)?)
    }

    fn efficacy(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.engine.efficacy().map_err(engine_err)?)
    }

    fn report(&self) -> PyResult<String> {
        self.engine.report().map_err(engine_err)
    }

    /// Number of records in the manifest.
    fn __len__(&self) -> usize {
        self.engine.manifest.len()
    }

    /// Accepted (source, transformed) face id pairs.
    fn accepted_pairs(&self) -> Vec<(String, String)> {
        let state = self.engine.manifest.state();
        state
            .verdicts
            .values()
            .filter(|v| v.accepted)
            .filter_map(|v| {
                let tf = state.faces.get(&v.transformed_face_id)?;
                Some((tf.parent_face_id.clone()?, tf.face_id.clone()))
            })
            .collect()
    }
}

#[pymodule]
pub fn cforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CforgeError", m.py().get_type::<CforgeError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<AttributeVector>()?;
    m.add_class::<TransitionMatrix>()?;
    m.add_class::<MockServer>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(rejection_reasons, m)?)?;
    m.add_function(wrap_pyfunction!(recall_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ci, m)?)?;
    m.add_function(wrap_pyfunction!(t_critical, m)?)?;
    m.add_function(wrap_pyfunction!(sig2, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_attribute_response, m)?)?;
    m.add_function(wrap_pyfunction!(parse_attribute_response, m)?)?;
    m.add_function(wrap_pyfunction!(attributes, m)?)?;
    Ok(())
}
