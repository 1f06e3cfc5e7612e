//! Python module `ncbf`: certificates, systems, the safety filter and the training,
//! verification and simulation pipeline.
//!
//! Structured results (reports, histories, summaries) are returned as plain Python
//! objects decoded from their JSON form.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ncbf_core::artifacts;
use ncbf_core::certificate;
use ncbf_core::config::RunConfig;
use ncbf_core::controller::CbfQp;
use ncbf_core::dynamics::{SystemParams, SystemRegistry};
use ncbf_core::simulator::{self, SliceSpec};
use ncbf_core::trainer::{self, RunStatus};
use ncbf_core::{ControlAffineSystem, Error, MlpCertificate, ReferencePolicy};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::SamplingStall { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_config(text: &str) -> PyResult<(RunConfig, ControlAffineSystem)> {
    let config = RunConfig::from_toml(text).map_err(py_err)?;
    let sys = config.validate(&SystemRegistry::with_builtins()).map_err(py_err)?;
    Ok((config, sys))
}

/// Softplus MLP certificate `h(x)`.
#[pyclass(name = "Certificate", module = "ncbf", skip_from_py_object)]
#[derive(Clone)]
struct PyCertificate {
    inner: MlpCertificate,
}

#[pymethods]
impl PyCertificate {
    /// Glorot-initialised network with the given layer sizes (input first, 1 last).
    #[staticmethod]
    #[pyo3(signature = (layer_sizes, seed = 0))]
    fn init(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: MlpCertificate::init_glorot(&layer_sizes, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: MlpCertificate::load(path).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: MlpCertificate::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params_flat()
    }

    fn with_params(&self, params: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_params_flat(&params).map_err(py_err)? })
    }

    /// `h(x)`.
    fn __call__(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.forward(&x).map_err(py_err)
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.input_gradient(&x).map_err(py_err)
    }

    fn value_and_gradient(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.inner.value_and_gradient(&x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Certificate(layer_sizes={:?})", self.inner.layer_sizes())
    }
}

/// A built-in control-affine system.
#[pyclass(name = "System", module = "ncbf", skip_from_py_object)]
#[derive(Clone)]
struct PySystem {
    inner: ControlAffineSystem,
}

#[pymethods]
impl PySystem {
    /// `name` is one of `dubins`, `planar_aerial`, `quadruped`, `integrator_1d`.
    #[new]
    #[pyo3(signature = (name, k1 = 0.0, k2 = 0.0, kr = 0.0))]
    fn new(name: &str, k1: f64, k2: f64, kr: f64) -> PyResult<Self> {
        let params = SystemParams { k1, k2, kr, ..SystemParams::default() };
        Ok(Self { inner: SystemRegistry::with_builtins().build(name, &params).map_err(py_err)? })
    }

    #[staticmethod]
    fn names() -> Vec<String> {
        SystemRegistry::with_builtins().names().map(str::to_string).collect()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn state_bounds(&self) -> Vec<(f64, f64)> {
        self.inner.state_bounds().iter().map(|b| (b.lo, b.hi)).collect()
    }

    #[getter]
    fn input_bounds(&self) -> Option<Vec<(f64, f64)>> {
        self.inner.input_bounds().map(|bs| bs.iter().map(|b| (b.lo, b.hi)).collect())
    }

    /// `"safe"`, `"unsafe"` or `"unlabeled"`.
    fn label(&self, x: Vec<f64>) -> String {
        format!("{:?}", self.inner.label(&x)).to_lowercase()
    }

    fn drift(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.eval_f(&x).map_err(py_err)
    }

    /// `g(x)` as `n` rows of `m` entries.
    fn actuation(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.eval_g(&x).map_err(py_err)?;
        Ok(g.chunks(self.inner.input_dim()).map(<[f64]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        format!("System({:?})", self.inner.name())
    }
}

/// CBF-QP safety filter around a constant reference input.
#[pyclass(name = "SafetyFilter", module = "ncbf")]
struct PySafetyFilter {
    inner: ncbf_core::SafetyFilter,
}

#[pymethods]
impl PySafetyFilter {
    /// Input bounds of the system are enforced; `reference` defaults to the system's
    /// nominal input.
    #[new]
    #[pyo3(signature = (certificate, system, kappa_gain = 1.0, reference = None))]
    fn new(certificate: &PyCertificate, system: &PySystem, kappa_gain: f64, reference: Option<Vec<f64>>) -> PyResult<Self> {
        let sys = system.inner.clone();
        let reference = ReferencePolicy::Constant(reference.unwrap_or_else(|| sys.default_reference().to_vec()));
        let law = CbfQp::new(sys, kappa_gain, reference).map_err(py_err)?;
        Ok(Self { inner: ncbf_core::SafetyFilter::new(certificate.inner.clone(), law).map_err(py_err)? })
    }

    fn filter_input(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.filter_input(&x).map_err(py_err)
    }

    /// The full filter decision as a dict (`input`, `reference`, `active`, `slack`).
    fn decide(&self, py: Python<'_>, x: Vec<f64>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.decide(&x).map_err(py_err)?)
    }

    /// RK4 rollout under the filter; returns states, inputs, h values and status.
    #[pyo3(signature = (x0, steps, dt = 0.02))]
    fn rollout(&self, py: Python<'_>, x0: Vec<f64>, steps: usize, dt: f64) -> PyResult<Py<PyAny>> {
        let r = py.detach(|| simulator::rollout(&self.inner, &x0, steps, dt)).map_err(py_err)?;
        to_py(py, &r)
    }
}

/// Trains and refines from a TOML config. With `out_dir` every artifact is written
/// there. Returns `(certificate, history, report, status)`.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train(py: Python<'_>, config: &str, out_dir: Option<PathBuf>) -> PyResult<(PyCertificate, Py<PyAny>, Py<PyAny>, String)> {
    let (config, sys) = parse_config(config)?;
    let out = py
        .detach(|| match &out_dir {
            Some(dir) => artifacts::train_to_dir(&config, &sys, dir),
            None => trainer::refine_system(&config.train, &sys, &mut |_| {}),
        })
        .map_err(py_err)?;
    let status = match out.status {
        RunStatus::Certified => "certified",
        RunStatus::BudgetExhausted => "budget_exhausted",
    };
    Ok((
        PyCertificate { inner: out.certificate },
        to_py(py, &out.history)?,
        to_py(py, &out.report)?,
        status.to_string(),
    ))
}

/// Conformal quantification of `certificate` under the config's verification settings.
#[pyfunction]
#[pyo3(signature = (config, certificate, out_dir))]
fn verify(py: Python<'_>, config: &str, certificate: &PyCertificate, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let (config, sys) = parse_config(config)?;
    let report = py
        .detach(|| artifacts::verify_to_dir(&config, &sys, &certificate.inner, &out_dir))
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Simulation campaign with the deployment filter; returns the summary.
#[pyfunction]
#[pyo3(signature = (config, certificate, out_dir))]
fn simulate(py: Python<'_>, config: &str, certificate: &PyCertificate, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let (config, sys) = parse_config(config)?;
    let summary = py
        .detach(|| artifacts::simulate_to_dir(&config, &sys, &certificate.inner, &out_dir))
        .map_err(py_err)?;
    to_py(py, &summary)
}

/// `h` on a 2-D slice; returns `axis0`, `axis1` and row-major `values`.
#[pyfunction]
#[pyo3(signature = (certificate, system, free_axes = (0, 1), fixed_values = None, resolution = 201))]
fn levelset(
    py: Python<'_>,
    certificate: &PyCertificate,
    system: &PySystem,
    free_axes: (usize, usize),
    fixed_values: Option<Vec<f64>>,
    resolution: usize,
) -> PyResult<Py<PyAny>> {
    let n = system.inner.state_dim();
    let slice = SliceSpec {
        free_axes: [free_axes.0, free_axes.1],
        fixed_values: fixed_values.unwrap_or_else(|| vec![0.0; n.saturating_sub(2)]),
        resolution,
    };
    let grid = simulator::levelset_grid(&certificate.inner, &slice, system.inner.state_bounds()).map_err(py_err)?;
    to_py(py, &grid)
}

/// Smallest ε with `P(violation > ε) ≤ β` for `N` samples at level α.
#[pyfunction]
fn epsilon_for(n_samples: usize, alpha: f64, beta: f64) -> PyResult<f64> {
    certificate::epsilon_for(n_samples, alpha, beta).map_err(py_err)
}

/// The `⌈(N+1)(1−α)⌉`-th smallest score.
#[pyfunction]
fn conformal_quantile(scores: Vec<f64>, alpha: f64) -> PyResult<f64> {
    certificate::conformal_quantile(&scores, alpha).map_err(py_err)
}

#[pyfunction]
fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> PyResult<f64> {
    certificate::regularized_incomplete_beta(x, a, b).map_err(py_err)
}

/// `[{n_samples, beta, alpha, epsilon, error}, ...]`; invalid α values carry an error.
#[pyfunction]
fn alpha_epsilon_curve(py: Python<'_>, n_samples: usize, beta: f64, alphas: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &trainer::alpha_epsilon_curve(n_samples, beta, &alphas))
}

#[pymodule]
fn ncbf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCertificate>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PySafetyFilter>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(levelset, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_for, m)?)?;
    m.add_function(wrap_pyfunction!(conformal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(regularized_incomplete_beta, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_epsilon_curve, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyDict;

    #[test]
    fn module_round_trip() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "ncbf").unwrap();
            ncbf(&m).unwrap();
            let locals = PyDict::new(py);
            locals.set_item("ncbf", &m).unwrap();
            py.run(
                c"
car = ncbf.System('dubins')
cert = ncbf.Certificate.init([3, 8, 1], seed=1)
assert ncbf.Certificate.from_json(cert.to_json())([0.1, 0.2, 0.3]) == cert([0.1, 0.2, 0.3])
assert car.label([0.0, 0.0, 0.0]) == 'unsafe'
u = ncbf.SafetyFilter(cert, car).filter_input([1.8, 0.0, 0.0])
assert len(u) == 2
assert abs(ncbf.epsilon_for(1000, 0.05, 1e-3) - 0.0737) < 1e-3
try:
    ncbf.epsilon_for(100, 0.001, 1e-3)
    raise AssertionError('expected ValueError')
except ValueError as e:
    assert 'insufficient samples' in str(e)
",
                None,
                Some(&locals),
            )
            .unwrap();
        });
    }
}
