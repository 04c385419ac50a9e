//! Python bindings. Positions cross the boundary as tuples, results that
//! carry many fields as plain dicts.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use uavloc::channel::RngStream;
use uavloc::config::{parse_run_config, PlanMode, RunConfig};
use uavloc::error::Error;
use uavloc::fim::{self, StepContribution};
use uavloc::mission::{self, ToaPath};
use uavloc::model::{self, ToaNoiseModel, ValidatedScenario, Vec2, Vec3};
use uavloc::{measlog, nr, planner};

type P3 = (f64, f64, f64);
type P2 = (f64, f64);

fn v3(p: P3) -> Vec3 {
    Vec3::new(p.0, p.1, p.2)
}

fn v2(p: P2) -> Vec2 {
    Vec2::new(p.0, p.1)
}

fn err(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// One-way line-of-sight delay in seconds.
#[pyfunction]
fn los_delay(uav: P3, user: P2) -> PyResult<f64> {
    uavloc::channel::los_delay(v3(uav), v2(user)).map_err(err)
}

#[pyfunction]
fn ta_unit(numerology: u32) -> PyResult<f64> {
    nr::ta_unit(numerology).map_err(err)
}

#[pyfunction]
fn coarse_rtt(ta: u64, numerology: u32) -> PyResult<f64> {
    nr::coarse_rtt(ta, numerology).map_err(err)
}

#[pyfunction]
fn ta_from_rtt(rtt: f64, numerology: u32) -> PyResult<u64> {
    nr::ta_from_rtt(rtt, numerology).map_err(err)
}

/// ToA estimate from timing advance plus SRS peak refinement.
#[pyfunction]
#[pyo3(signature = (delay, numerology=1, sample_rate=61.44e6, drift_offset=0.0, seed=0))]
fn estimate_toa_nr(delay: f64, numerology: u32, sample_rate: f64, drift_offset: f64, seed: u64) -> PyResult<f64> {
    let cfg = nr::NrConfig::with_default_window(numerology, sample_rate).map_err(err)?;
    nr::estimate_toa_nr(delay, &cfg, drift_offset, &mut RngStream::new(seed)).map_err(err)
}

/// Indices of the positions kept by distance-based sparsification.
#[pyfunction]
fn sparsify(positions: Vec<P3>, delta: f64) -> Vec<usize> {
    let pts: Vec<Vec3> = positions.into_iter().map(v3).collect();
    uavloc::channel::sparsify(&pts, delta)
}

#[pyfunction]
fn reach_threshold(step: usize, mission_steps: usize, d_max: f64) -> f64 {
    planner::reach_threshold(step, mission_steps, d_max)
}

/// Cumulative Fisher information over user positions.
#[pyclass(name = "InfoState")]
struct PyInfoState {
    inner: fim::InfoState,
    noise: ToaNoiseModel,
}

#[pymethods]
impl PyInfoState {
    #[new]
    #[pyo3(signature = (num_users, sigma_tau=12.5e-9, eps_prior=fim::DEFAULT_EPS_PRIOR))]
    fn new(num_users: usize, sigma_tau: f64, eps_prior: f64) -> Self {
        Self {
            inner: fim::InfoState::new(num_users, eps_prior),
            noise: ToaNoiseModel::constant(sigma_tau),
        }
    }

    /// Adds the measurements taken from `uav` towards every user.
    fn add(&mut self, uav: P3, users: Vec<P2>) -> PyResult<()> {
        let users: Vec<Vec2> = users.into_iter().map(v2).collect();
        let c = StepContribution::at(v3(uav), &users, &self.noise).map_err(err)?;
        self.inner = fim::accumulate(&self.inner, &c).map_err(err)?;
        Ok(())
    }

    fn crb_trace(&self) -> PyResult<f64> {
        fim::crb_trace(&self.inner).map_err(err)
    }

    /// Trace of the CRB reduction a measurement at `uav` would bring.
    fn improvement(&self, uav: P3, users: Vec<P2>) -> PyResult<f64> {
        let users: Vec<Vec2> = users.into_iter().map(v2).collect();
        let c = StepContribution::at(v3(uav), &users, &self.noise).map_err(err)?;
        Ok(fim::improvement_matrix(&self.inner, &c).map_err(err)?.trace())
    }

    fn fim(&self) -> Vec<Vec<f64>> {
        let f = self.inner.fim();
        (0..f.nrows()).map(|i| f.row(i).iter().copied().collect()).collect()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.step
    }
}

/// A validated scenario together with its solver and mission options.
#[pyclass(name = "Scenario")]
struct PyScenario {
    config: RunConfig,
    scenario: ValidatedScenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let config = parse_run_config(text).map_err(err)?;
        let scenario = model::validate_scenario(config.scenario.clone()).map_err(err)?;
        Ok(Self { config, scenario })
    }

    fn to_toml(&self) -> String {
        self.config.to_toml()
    }

    #[getter]
    fn users(&self) -> Vec<P2> {
        self.scenario.users.iter().map(|u| (u.x, u.y)).collect()
    }

    #[getter]
    fn mission_steps(&self) -> usize {
        self.scenario.mission_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.scenario.seed
    }

    /// Runs one mission; `mode` is "greedy" or "fixed", `toa` "ideal" or "nr".
    #[pyo3(signature = (seed=None, mode=None, toa=None))]
    fn run<'py>(&self, py: Python<'py>, seed: Option<u64>, mode: Option<&str>, toa: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let (s, cfg) = self.prepare(seed, mode, toa)?;
        let r = py.detach(|| mission::run_mission(&s, &cfg.mission_config())).map_err(err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (runs, seed=None, mode=None, toa=None))]
    fn monte_carlo<'py>(
        &self,
        py: Python<'py>,
        runs: usize,
        seed: Option<u64>,
        mode: Option<&str>,
        toa: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (s, cfg) = self.prepare(seed, mode, toa)?;
        let r = py.detach(|| mission::monte_carlo(&s, &cfg.mission_config(), runs)).map_err(err)?;
        to_py(py, &r)
    }

    /// Solves a measurement log given as CSV text.
    fn solve<'py>(&self, py: Python<'py>, log_csv: &str) -> PyResult<Bound<'py, PyAny>> {
        let samples = measlog::read_measurements(log_csv.as_bytes()).map_err(err)?;
        let (state, report) = mission::solve_samples(&self.scenario, &samples, &self.config.mission_config()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("users", state.users.iter().map(|u| (u.x, u.y)).collect::<Vec<_>>())?;
        d.set_item("uav", state.uav.iter().map(|x| (x.x, x.y, x.z)).collect::<Vec<_>>())?;
        d.set_item("iterations", report.iterations)?;
        d.set_item("converged", report.converged)?;
        Ok(d.into_any())
    }
}

impl PyScenario {
    fn prepare(&self, seed: Option<u64>, mode: Option<&str>, toa: Option<&str>) -> PyResult<(ValidatedScenario, RunConfig)> {
        let mut cfg = self.config.clone();
        if let Some(seed) = seed {
            cfg.scenario.seed = seed;
        }
        match mode {
            None => {}
            Some("greedy") => cfg.mission.mode = PlanMode::Greedy,
            Some("fixed") => cfg.mission.mode = PlanMode::Fixed,
            Some(other) => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        }
        match toa {
            None => {}
            Some("ideal") => cfg.mission.toa = ToaPath::Ideal,
            Some("nr") => cfg.mission.toa = ToaPath::Nr,
            Some(other) => return Err(PyValueError::new_err(format!("unknown toa path {other:?}"))),
        }
        let s = model::validate_scenario(cfg.scenario.clone()).map_err(err)?;
        Ok((s, cfg))
    }
}

#[pymodule]
#[pyo3(name = "uavloc")]
fn uavloc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SPEED_OF_LIGHT", model::SPEED_OF_LIGHT)?;
    m.add_function(wrap_pyfunction!(los_delay, m)?)?;
    m.add_function(wrap_pyfunction!(ta_unit, m)?)?;
    m.add_function(wrap_pyfunction!(coarse_rtt, m)?)?;
    m.add_function(wrap_pyfunction!(ta_from_rtt, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_toa_nr, m)?)?;
    m.add_function(wrap_pyfunction!(sparsify, m)?)?;
    m.add_function(wrap_pyfunction!(reach_threshold, m)?)?;
    m.add_class::<PyInfoState>()?;
    m.add_class::<PyScenario>()?;
    Ok(())
}
