//! Python bindings. Structured results cross the boundary as JSON-derived
//! dicts and lists.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rlls_core::exbmdp::ExbmdpTargets;
use rlls_core::harness::{self, ExperimentConfig};
use rlls_core::mdp::Cursor;
use rlls_core::oracle;

fn core_err(e: rlls_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "TabularMdp", frozen)]
struct PyMdp {
    inner: Arc<rlls_core::TabularMdp>,
}

#[pymethods]
impl PyMdp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = rlls_core::TabularMdp::from_json(text).map_err(core_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn twochain() -> Self {
        Self {
            inner: Arc::new(rlls_core::instances::twochain()),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(core_err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn states_per_layer(&self) -> Vec<usize> {
        self.inner.states_per_layer().to_vec()
    }
}

#[pyclass(name = "Session", unsendable)]
struct PySession {
    inner: rlls_core::LocalSimSession,
}

#[pymethods]
impl PySession {
    #[new]
    fn new(mdp: &PyMdp, seed: u64) -> Self {
        Self {
            inner: rlls_core::LocalSimSession::new(Arc::clone(&mdp.inner), seed),
        }
    }

    fn start_episode(&mut self) -> usize {
        self.inner.start_episode()
    }

    /// Returns `(reward, next_state)`; `next_state` is None after the last layer.
    fn step(&mut self, action: usize) -> PyResult<(f64, Option<usize>)> {
        self.inner.step(action).map_err(core_err)
    }

    fn reset_to(&mut self, layer: usize, state: usize) -> PyResult<()> {
        self.inner.reset_to(layer, state).map_err(core_err)
    }

    fn sample_from(&mut self, layer: usize, state: usize, action: usize) -> PyResult<(f64, Option<usize>)> {
        self.inner.sample_from(layer, state, action).map_err(core_err)
    }

    /// `(layer, state)` of the cursor, or None outside an episode.
    fn cursor(&self) -> Option<(usize, usize)> {
        match self.inner.cursor() {
            Cursor::At { layer, state } => Some((layer, state)),
            Cursor::Idle | Cursor::Terminal => None,
        }
    }

    fn ledger(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.ledger())
    }
}

#[pyfunction]
fn oracle_summary(py: Python<'_>, mdp: &PyMdp) -> PyResult<Py<PyAny>> {
    to_py(py, &harness::oracle_summary(&mdp.inner))
}

/// Exact return of a deterministic policy given as `actions[h][x]`.
#[pyfunction]
fn policy_value(mdp: &PyMdp, actions: Vec<Vec<usize>>) -> PyResult<f64> {
    let spl = mdp.inner.states_per_layer();
    if actions.len() != spl.len() || actions.iter().zip(spl).any(|(a, &n)| a.len() != n) {
        return Err(PyValueError::new_err("policy shape does not match the MDP"));
    }
    if actions.iter().flatten().any(|&a| a >= mdp.inner.num_actions()) {
        return Err(PyValueError::new_err("action out of range"));
    }
    let pi = rlls_core::PolicyTable::from_actions(&actions, mdp.inner.num_actions());
    Ok(oracle::expected_return(&mdp.inner, &pi))
}

/// Generates an ExBMDP bundle from a targets dict serialised as JSON.
#[pyfunction]
#[pyo3(signature = (targets_json, seed=0))]
fn generate(py: Python<'_>, targets_json: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let targets: ExbmdpTargets =
        serde_json::from_str(targets_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &harness::generate_bundle(seed, &targets).map_err(core_err)?)
}

#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<Py<PyAny>> {
    let config = ExperimentConfig::from_json(config_json).map_err(core_err)?;
    let report = py.detach(|| harness::run_experiment(&config)).map_err(core_err)?;
    to_py(py, &report)
}

#[pymodule]
fn rlls(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(oracle_summary, m)?)?;
    m.add_function(wrap_pyfunction!(policy_value, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
