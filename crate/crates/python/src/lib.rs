//! Python bindings. Structured results come back as plain dicts and lists (via JSON), so
//! they mirror the serialized forms used by the CLI and the HTTP API.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use trimodal_core::allocation::{
    self, AllocationRecord, BudgetScale, ModelCoefficients, ModelKind,
};
use trimodal_core::cost::{self, CostCatalog, Modality};
use trimodal_core::psychometric::{
    self, FitOptions, FitReport, PfFamily, PresentationOrder, PsychometricFit as CoreFit, TrialRecord,
};
use trimodal_core::session::{self, Clock, Session as CoreSession};
use trimodal_core::staircase::{self, DeviceRange, SimulationConfig, WeberObserver};
use trimodal_core::transport;

create_exception!(trimodal, TrimodalError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    TrimodalError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn family(name: &str) -> PyResult<PfFamily> {
    name.parse().map_err(err)
}

/// A psychometric function ψ(x) = γ + (1 − γ − λ)·F(x; α, β).
#[pyclass(name = "PsychometricFit", module = "trimodal", from_py_object)]
#[derive(Clone)]
struct PyFit {
    inner: CoreFit,
}

#[pymethods]
impl PyFit {
    #[new]
    #[pyo3(signature = (family_name, alpha, beta, gamma = 0.5, lapse = 0.0))]
    fn new(family_name: &str, alpha: f64, beta: f64, gamma: f64, lapse: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreFit::with_params(family(family_name)?, alpha, beta, gamma, lapse),
        })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
    #[getter]
    fn lapse(&self) -> f64 {
        self.inner.lambda
    }
    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    fn eval(&self, x: f64) -> f64 {
        psychometric::eval_pf(&self.inner, x)
    }

    fn threshold(&self, p: f64) -> PyResult<f64> {
        psychometric::threshold_at(&self.inner, p).map_err(err)
    }

    fn slope_at_threshold(&self) -> f64 {
        self.inner.slope_at_threshold()
    }

    fn __repr__(&self) -> String {
        format!(
            "PsychometricFit({}, alpha={}, beta={}, gamma={}, lapse={})",
            self.inner.family.name(),
            self.inner.alpha,
            self.inner.beta,
            self.inner.gamma,
            self.inner.lambda
        )
    }
}

fn trial_records(trials: Vec<(f64, f64, bool)>) -> PyResult<Vec<TrialRecord>> {
    trials
        .into_iter()
        .map(|(s, p, c)| TrialRecord::new(s, p, c, PresentationOrder::PedestalFirst).map_err(err))
        .collect()
}

/// Maximum-likelihood fit to `(stimulus, pedestal, correct)` trials.
#[pyfunction]
#[pyo3(signature = (trials, family_name = "logistic", seed = 0))]
fn fit_pf(trials: Vec<(f64, f64, bool)>, family_name: &str, seed: u64) -> PyResult<PyFit> {
    let opts = FitOptions {
        seed,
        ..FitOptions::default()
    };
    let fit = psychometric::fit_pf(&trial_records(trials)?, family(family_name)?, &opts).map_err(err)?;
    Ok(PyFit { inner: fit })
}

/// Fit plus parametric-bootstrap SDs and Monte-Carlo goodness of fit, as a dict.
#[pyfunction]
#[pyo3(signature = (trials, family_name = "logistic", bootstrap = 1000, gof = 1000, seed = 0))]
fn fit_report(
    py: Python<'_>,
    trials: Vec<(f64, f64, bool)>,
    family_name: &str,
    bootstrap: usize,
    gof: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let trials = trial_records(trials)?;
    let opts = FitOptions {
        seed,
        ..FitOptions::default()
    };
    let report = py.detach(|| -> Result<FitReport, psychometric::PsychometricError> {
        let fit = psychometric::fit_pf(&trials, family(family_name).map_err(|_| {
            psychometric::PsychometricError::InvalidTrial(format!("unknown family `{family_name}`"))
        })?, &opts)?;
        let boot = (bootstrap > 1).then(|| psychometric::bootstrap_se(&fit, &trials, bootstrap, seed, &opts)).transpose()?;
        let g = (gof > 0).then(|| psychometric::deviance_gof(&fit, &trials, gof, seed, &opts));
        Ok(FitReport::new(&fit, boot.as_ref(), g.as_ref()))
    });
    to_py(py, &report.map_err(err)?)
}

#[pyfunction]
fn weber_constant(pedestal: f64, jnd: f64) -> PyResult<f64> {
    staircase::weber_constant(pedestal, jnd).map_err(err)
}

#[pyfunction]
fn weber_predict(pedestal: f64, k: f64) -> f64 {
    staircase::weber_predict(pedestal, k)
}

#[pyfunction]
#[pyo3(signature = (pedestal, k, c_min = 1.2, c_max = 11.2, max_stimuli = 10, grid = 0.1))]
fn adapted_phase_plan(
    py: Python<'_>,
    pedestal: f64,
    k: f64,
    c_min: f64,
    c_max: f64,
    max_stimuli: usize,
    grid: f64,
) -> PyResult<Py<PyAny>> {
    let range = DeviceRange::new(c_min, c_max).map_err(err)?;
    to_py(py, &staircase::adapted_phase_plan(pedestal, k, range, max_stimuli, grid))
}

/// Whole JND protocol against a synthetic Weber observer.
#[pyfunction]
#[pyo3(signature = (k, seed = 0, trials_per_pair = 100))]
fn simulate_jnd(py: Python<'_>, k: f64, seed: u64, trials_per_pair: u32) -> PyResult<Py<PyAny>> {
    let config = SimulationConfig {
        seed,
        trials_per_pair,
        ..SimulationConfig::default()
    };
    let report = py.detach(|| staircase::simulate_session(&WeberObserver::new(k), &config)).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (k, n = cost::SOURCE_LEVELS))]
fn visual_cost(k: u32, n: u32) -> PyResult<f64> {
    cost::visual_cost(k, n).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (f, f_max = cost::MAX_AUDIO_RATE_HZ))]
fn audio_cost(f: f64, f_max: f64) -> PyResult<f64> {
    cost::audio_cost(f, f_max).map_err(err)
}

#[pyfunction]
fn smell_cost(scenario: &str) -> PyResult<f64> {
    cost::smell_cost(scenario).map_err(err)
}

/// Default budgets, ladders and smell costs.
#[pyfunction]
fn catalog(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &CostCatalog::default())
}

#[pyfunction]
fn reference_coefficients(py: Python<'_>, model: &str) -> PyResult<Py<PyAny>> {
    let kind: ModelKind = model.parse().map_err(err)?;
    to_py(py, &ModelCoefficients::reference(kind))
}

fn regressor(budget: &Bound<'_, PyAny>, scale: &str) -> PyResult<f64> {
    if let Ok(v) = budget.extract::<f64>() {
        return Ok(v);
    }
    let label: String = budget.extract()?;
    let scale = match scale {
        "percent" => BudgetScale::PercentOfReference,
        "levels" => BudgetScale::LevelCount,
        other => return Err(err(format!("unknown budget scale `{other}`"))),
    };
    let catalog = CostCatalog::default();
    Ok(scale.regressor(catalog.budget(&label).map_err(err)?))
}

/// Allocation predicted by M1/M2. `budget` is a label (``"B4"``) or a regressor value.
#[pyfunction]
#[pyo3(signature = (budget, scenario = None, model = "m2", coefficients = None, scale = "percent"))]
fn predict(
    py: Python<'_>,
    budget: &Bound<'_, PyAny>,
    scenario: Option<&str>,
    model: &str,
    coefficients: Option<&Bound<'_, PyAny>>,
    scale: &str,
) -> PyResult<Py<PyAny>> {
    let coeffs: ModelCoefficients = match coefficients {
        Some(c) => from_py(c)?,
        None => ModelCoefficients::reference(model.parse().map_err(err)?),
    };
    let scenario = if coeffs.model == ModelKind::M1 { None } else { scenario };
    to_py(py, &allocation::predict(&coeffs, regressor(budget, scale)?, scenario).map_err(err)?)
}

/// Fits M1/M2 to a list of record dicts; returns coefficients and offset tests.
#[pyfunction]
#[pyo3(signature = (records, kind = "m2", alpha = 0.05, baseline = "Bathroom", cell_means = false))]
fn fit_model(
    py: Python<'_>,
    records: &Bound<'_, PyAny>,
    kind: &str,
    alpha: f64,
    baseline: &str,
    cell_means: bool,
) -> PyResult<Py<PyAny>> {
    let mut records: Vec<AllocationRecord> = from_py(records)?;
    if cell_means {
        records = allocation::group_means(&records);
    }
    let fitted = allocation::fit_detailed(&records, kind.parse().map_err(err)?, alpha, baseline).map_err(err)?;
    to_py(py, &fitted)
}

#[pyfunction]
#[pyo3(signature = (coefficients, records, scenario_map = None))]
fn validate(
    py: Python<'_>,
    coefficients: &Bound<'_, PyAny>,
    records: &Bound<'_, PyAny>,
    scenario_map: Option<BTreeMap<String, String>>,
) -> PyResult<Py<PyAny>> {
    let coeffs: ModelCoefficients = from_py(coefficients)?;
    let records: Vec<AllocationRecord> = from_py(records)?;
    let summary = allocation::validate(&coeffs, &records, &scenario_map.unwrap_or_default()).map_err(err)?;
    to_py(py, &summary)
}

#[pyfunction]
fn summarize(py: Python<'_>, records: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let records: Vec<AllocationRecord> = from_py(records)?;
    to_py(py, &allocation::summarize(&records).map_err(err)?)
}

/// Probe series `[(t_s, c_ppm), ...]` for a built-in scene name or a scene file.
#[pyfunction]
#[pyo3(signature = (scene, cells, duration = 1800.0, rate = 4.0))]
fn simulate_smell(py: Python<'_>, scene: &str, cells: usize, duration: f64, rate: f64) -> PyResult<Vec<(f64, f64)>> {
    let path = PathBuf::from(scene);
    let spec = if path.exists() {
        transport::SceneSpec::load(&path)
    } else {
        transport::builtin_scene(scene)
    }
    .map_err(err)?;
    let probe = spec
        .probe
        .unwrap_or([spec.extent[0] / 2.0, spec.extent[1] / 2.0, spec.extent[2] / 2.0]);
    let run = py
        .detach(|| {
            let mesh = transport::build_mesh(&spec, cells)?;
            transport::simulate(&spec, &mesh, duration, rate, probe)
        })
        .map_err(err)?;
    Ok(run.series.samples)
}

/// One participant's allocation session over every budget x scenario combination.
#[pyclass(name = "Session", module = "trimodal")]
struct PySession {
    inner: CoreSession,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (session_id, participant_id, seed = 0, deterministic_clock = false))]
    fn new(session_id: &str, participant_id: &str, seed: u64, deterministic_clock: bool) -> PyResult<Self> {
        let mut inner = CoreSession::new(session_id, participant_id, CostCatalog::default(), seed).map_err(err)?;
        if deterministic_clock {
            inner.set_clock(Clock::Manual { next: 0, step: 1 });
        }
        Ok(Self { inner })
    }

    /// Current trial state, or None once every combination is committed.
    #[getter]
    fn current(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.current())
    }

    #[getter]
    fn position(&self) -> usize {
        self.inner.position()
    }

    #[getter]
    fn total_trials(&self) -> usize {
        self.inner.total_trials()
    }

    #[getter]
    fn complete(&self) -> bool {
        self.inner.is_complete()
    }

    /// Returns `(state, outcome)` with outcome "applied", "compensated" or "rejected".
    fn set_level(&mut self, py: Python<'_>, modality: &str, index: usize) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
        let modality: Modality = modality.parse().map_err(err)?;
        let (state, outcome) = self.inner.set_level(modality, index).map_err(err)?;
        Ok((to_py(py, &state)?, to_py(py, &outcome)?))
    }

    fn set_smell(&mut self, py: Python<'_>, on: bool) -> PyResult<Py<PyAny>> {
        let state = self.inner.set_smell(on).map_err(err)?;
        to_py(py, &state)
    }

    fn toggle_smell(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let state = self.inner.toggle_smell().map_err(err)?;
        to_py(py, &state)
    }

    fn commit(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let record = self.inner.commit().map_err(err)?;
        to_py(py, &record)
    }

    fn records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.records())
    }

    fn log(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.log())
    }

    /// Appends this session to a checksummed store file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        session::append(&path, self.inner.log()).map_err(err)
    }
}

/// Loads a store, replays every session and returns the logs.
#[pyfunction]
fn load_store(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let logs = session::load(&path).map_err(err)?;
    for log in &logs {
        session::replay(log).map_err(err)?;
    }
    to_py(py, &logs)
}

#[pymodule]
pub fn trimodal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrimodalError", m.py().get_type::<TrimodalError>())?;
    m.add_class::<PyFit>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(fit_pf, m)?)?;
    m.add_function(wrap_pyfunction!(fit_report, m)?)?;
    m.add_function(wrap_pyfunction!(weber_constant, m)?)?;
    m.add_function(wrap_pyfunction!(weber_predict, m)?)?;
    m.add_function(wrap_pyfunction!(adapted_phase_plan, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_jnd, m)?)?;
    m.add_function(wrap_pyfunction!(visual_cost, m)?)?;
    m.add_function(wrap_pyfunction!(audio_cost, m)?)?;
    m.add_function(wrap_pyfunction!(smell_cost, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(reference_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(fit_model, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_smell, m)?)?;
    m.add_function(wrap_pyfunction!(load_store, m)?)?;
    Ok(())
}
