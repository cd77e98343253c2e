//! Python bindings: build a problem from an experiment config (JSON text),
//! then solve it open loop, run it closed loop, or query gradients.

use agdmpc::agd::{agd_solve, AdamState, AgdSettings, SolveResult};
use agdmpc::cost::{CostWeights, ReferenceSpec};
use agdmpc::ddp::{ddp_solve, DdpSettings};
use agdmpc::dynamics::{ControlVec, ModelSpec, StateVec};
use agdmpc::gradcheck::{default_models, run_gradcheck, GradcheckOptions};
use agdmpc::mpc::{metrics, run_mpc, DisturbanceEvent, MpcConfig, SolverSettings};
use agdmpc::ocp::OcpDef;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    model: ModelSpec,
    cost: CostSection,
    ocp: OcpSection,
    #[serde(default)]
    agd: AgdSettings,
    #[serde(default)]
    ddp: DdpSettings,
    #[serde(default)]
    mpc: Option<serde_json::Value>,
    #[serde(default)]
    disturbances: Vec<DisturbanceEvent>,
    #[serde(default)]
    #[allow(dead_code)]
    output_dir: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSection {
    weights: CostWeights,
    reference: ReferenceSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OcpSection {
    horizon: usize,
    dt: f64,
    x0: Vec<f64>,
}

fn py_err(e: agdmpc::Error) -> PyErr {
    match e {
        agdmpc::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows<'a>(vs: impl IntoIterator<Item = &'a StateVec>) -> Vec<Vec<f64>> {
    vs.into_iter().map(|v| v.iter().copied().collect()).collect()
}

#[pyclass(frozen)]
struct Problem {
    ocp: OcpDef,
    agd: AgdSettings,
    ddp: DdpSettings,
    mpc: Option<serde_json::Value>,
    disturbances: Vec<DisturbanceEvent>,
}

impl Problem {
    fn controls(&self, us: Vec<Vec<f64>>) -> PyResult<Vec<ControlVec>> {
        let us: Vec<ControlVec> = us.iter().map(|u| ControlVec::from_column_slice(u)).collect();
        self.ocp.check_controls(&us).map_err(py_err)?;
        Ok(us)
    }

    fn mpc_config(&self, solver: &str) -> PyResult<MpcConfig> {
        let Some(mut v) = self.mpc.clone() else {
            return Err(PyValueError::new_err("config has no mpc section"));
        };
        if let Some(per_solver) = v["iters_per_cycle"].get(solver).cloned() {
            v["iters_per_cycle"] = per_solver;
        }
        serde_json::from_value(v).map_err(|e| PyValueError::new_err(format!("mpc section: {e}")))
    }

    fn settings(&self, solver: &str) -> PyResult<SolverSettings> {
        match solver {
            "agd" => Ok(SolverSettings::Agd(self.agd.clone())),
            "ddp" => Ok(SolverSettings::Ddp(self.ddp.clone())),
            other => Err(PyValueError::new_err(format!("unknown solver {other:?}, expected \"agd\" or \"ddp\""))),
        }
    }
}

#[pymethods]
impl Problem {
    /// Parses an experiment config given as JSON text.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let c: Config = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let ocp = OcpDef::new(
            c.model,
            c.cost.weights,
            c.cost.reference,
            c.ocp.horizon,
            c.ocp.dt,
            StateVec::from_column_slice(&c.ocp.x0),
        )
        .map_err(py_err)?;
        Ok(Problem { ocp, agd: c.agd, ddp: c.ddp, mpc: c.mpc, disturbances: c.disturbances })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.ocp.horizon
    }

    #[getter]
    fn nx(&self) -> usize {
        self.ocp.nx()
    }

    #[getter]
    fn nu(&self) -> usize {
        self.ocp.nu()
    }

    /// Returns `(xs, cost)` for the control sequence `us`.
    fn rollout(&self, us: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
        let traj = self.ocp.rollout(&self.controls(us)?).map_err(py_err)?;
        Ok((rows(&traj.xs), traj.cost))
    }

    /// Gradient of the total cost with respect to every control.
    fn gradient(&self, us: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let traj = self.ocp.rollout(&self.controls(us)?).map_err(py_err)?;
        let g = self.ocp.adjoint_gradient(&traj).map_err(py_err)?;
        Ok(rows(&g.g))
    }

    /// Open-loop solve from the reference controls.
    #[pyo3(signature = (solver = "agd", max_iters = None))]
    fn solve<'py>(&self, py: Python<'py>, solver: &str, max_iters: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let us0 = self.ocp.reference_controls();
        let res: SolveResult = match self.settings(solver)? {
            SolverSettings::Agd(s) => {
                let s = AgdSettings { max_iters: max_iters.unwrap_or(s.max_iters), ..s };
                agd_solve(&self.ocp, &us0, &AdamState::zeros(self.ocp.horizon, self.ocp.nu()), &s).map_err(py_err)?.0
            }
            SolverSettings::Ddp(s) => {
                let s = DdpSettings { max_iters: max_iters.unwrap_or(s.max_iters), ..s };
                ddp_solve(&self.ocp, &us0, &s).map_err(py_err)?
            }
        };
        let out = PyDict::new(py);
        out.set_item("final_cost", res.final_cost)?;
        out.set_item("grad_norm", res.grad_norm)?;
        out.set_item("iterations", res.iterations_run)?;
        out.set_item("status", serde_json::to_value(res.status).ok().and_then(|v| v.as_str().map(String::from)))?;
        out.set_item("costs", res.per_iter_log.iter().map(|r| r.cost).collect::<Vec<_>>())?;
        out.set_item("xs", rows(&res.traj.xs))?;
        out.set_item("us", rows(&res.traj.us))?;
        Ok(out)
    }

    /// Closed-loop run using the config's mpc section.
    #[pyo3(signature = (solver = "agd", duration = None, disturb = false))]
    fn mpc<'py>(
        &self,
        py: Python<'py>,
        solver: &str,
        duration: Option<f64>,
        disturb: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = self.mpc_config(solver)?;
        if let Some(d) = duration {
            cfg.sim_duration = d;
        }
        let events = if disturb { self.disturbances.as_slice() } else { &[] };
        let log = run_mpc(&self.ocp, &cfg, &self.settings(solver)?, events).map_err(py_err)?;
        let summary = metrics(&log, events);
        let out = PyDict::new(py);
        out.set_item("t", log.records.iter().map(|r| r.t).collect::<Vec<_>>())?;
        out.set_item("x", rows(log.records.iter().map(|r| &r.x)))?;
        out.set_item("u", rows(log.records.iter().map(|r| &r.u_applied)))?;
        out.set_item("running_cost", log.records.iter().map(|r| r.running_cost).collect::<Vec<_>>())?;
        out.set_item("ee_error", log.records.iter().map(|r| r.ee_error).collect::<Vec<_>>())?;
        out.set_item("mean_running_cost", summary.mean_running_cost)?;
        out.set_item("rms_ee_error", summary.rms_ee_error)?;
        out.set_item("divergence_count", summary.divergence_count)?;
        out.set_item("recovery_times", summary.recovery_times)?;
        Ok(out)
    }
}

/// Finite-difference check of the adjoint gradient, cost derivatives and
/// dynamics Jacobians on the built-in models. Returns
/// `(model, check, max_rel_err, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (instances = 20, seed = 0))]
fn gradcheck(instances: usize, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let opts = GradcheckOptions { instances, seed, ..GradcheckOptions::default() };
    let lines = run_gradcheck(&default_models(), &opts).map_err(py_err)?;
    Ok(lines
        .into_iter()
        .map(|l| {
            let model =
                serde_json::to_value(l.model).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            (model, l.check.to_string(), l.max_rel_err, l.passed)
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "agdmpc_py")]
pub fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
