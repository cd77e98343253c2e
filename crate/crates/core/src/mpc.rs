//! Closed-loop receding-horizon simulation.
//!
//! Every control cycle re-solves the horizon problem from the measured plant
//! state with a fixed iteration budget, applies the first control, and warm
//! starts the next cycle from the shifted solution. Disturbances are plant
//! inputs only; the solver never sees them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agd::{agd_solve, AdamState, AgdSettings, SolveResult, SolveStatus};
use crate::ddp::{ddp_solve, DdpSettings};
use crate::dynamics::{ControlVec, ModelSpec, StateVec};
use crate::error::{check_finite, check_len, invalid, Error, Result};
use crate::instrument::{self, Counters};
use crate::ocp::OcpDef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub sim_duration: f64,
    pub control_dt: f64,
    pub iters_per_cycle: usize,
    pub preview_reference: bool,
    /// Carried into reports. The closed loop itself draws no random numbers.
    pub seed: u64,
    /// Start each cycle from the shifted previous solution (and moments).
    pub warm_start: bool,
    /// Evaluate the control gradient at each cycle's final iterate for the log.
    pub log_grad_norm: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            sim_duration: 10.0,
            control_dt: 1e-3,
            iters_per_cycle: 8,
            preview_reference: true,
            seed: 0,
            warm_start: true,
            log_grad_norm: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_duration.is_finite() && self.sim_duration > 0.0) {
            return Err(invalid("mpc sim_duration must be positive"));
        }
        if !(self.control_dt.is_finite() && self.control_dt > 0.0) {
            return Err(invalid("mpc control_dt must be positive"));
        }
        if self.iters_per_cycle == 0 {
            return Err(invalid("mpc iters_per_cycle must be at least 1"));
        }
        Ok(())
    }

    /// Number of control cycles, `sim_duration / control_dt` rounded down.
    pub fn cycles(&self) -> usize {
        (self.sim_duration / self.control_dt + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Agd,
    Ddp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolverSettings {
    Agd(AgdSettings),
    Ddp(DdpSettings),
}

impl SolverSettings {
    pub fn kind(&self) -> SolverKind {
        match self {
            SolverSettings::Agd(_) => SolverKind::Agd,
            SolverSettings::Ddp(_) => SolverKind::Ddp,
        }
    }
}

/// Extra plant torque applied while `t_start <= t < t_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub tau_extra: Vec<f64>,
}

impl DisturbanceEvent {
    pub fn validate(&self, nu: usize) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start < self.t_end) {
            return Err(invalid("disturbance requires finite t_start < t_end"));
        }
        check_len("disturbance torque", self.tau_extra.len(), nu)?;
        check_finite("disturbance torque", &self.tau_extra)
    }

    pub fn active(&self, t: f64) -> bool {
        self.t_start <= t && t < self.t_end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcRecord {
    pub t: f64,
    /// Plant state at the start of the cycle.
    pub x: StateVec,
    pub u_applied: ControlVec,
    pub running_cost: f64,
    pub ee_error: f64,
    /// Max-abs control gradient at the cycle's final iterate (NaN when not logged).
    pub grad_norm: f64,
    pub solve_time_s: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Completed,
    PlantDiverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcLog {
    pub records: Vec<MpcRecord>,
    pub control_dt: f64,
    pub seed: u64,
    pub solver: SolverKind,
    pub status: MpcStatus,
    /// Cycles whose solve diverged and held the previous control.
    pub divergence_count: usize,
    pub solves: u64,
    /// Evaluation counters accumulated over every solve of the run.
    pub counters: Counters,
}

/// Shifts the warm start forward by one full horizon step, holding the last entry.
pub fn shift_warm_start(us: &[ControlVec], adam: Option<&AdamState>) -> (Vec<ControlVec>, Option<AdamState>) {
    shift_warm_start_by(us, adam, 1.0)
}

/// Shifts the warm start by `fraction` of a horizon step, interpolating
/// linearly between neighbours and holding the last entry. A fraction of 1
/// is the plain one-step shift.
pub fn shift_warm_start_by(
    us: &[ControlVec],
    adam: Option<&AdamState>,
    fraction: f64,
) -> (Vec<ControlVec>, Option<AdamState>) {
    let shifted = adam.map(|a| AdamState {
        m: shift_seq(&a.m, fraction),
        v: shift_seq(&a.v, fraction),
        step_count: a.step_count,
    });
    (shift_seq(us, fraction), shifted)
}

fn shift_seq(seq: &[ControlVec], f: f64) -> Vec<ControlVec> {
    let n = seq.len();
    (0..n)
        .map(|t| {
            if t + 1 >= n {
                seq[t].clone()
            } else if f == 1.0 {
                seq[t + 1].clone()
            } else {
                &seq[t] * (1.0 - f) + &seq[t + 1] * f
            }
        })
        .collect()
}

/// One plant step with every active disturbance added to the input torque.
pub fn plant_step(
    model: &ModelSpec,
    x: &StateVec,
    u_applied: &ControlVec,
    events: &[DisturbanceEvent],
    t: f64,
    control_dt: f64,
) -> Result<StateVec> {
    let mut u = u_applied.clone();
    for ev in events.iter().filter(|e| e.active(t)) {
        check_len("disturbance torque", ev.tau_extra.len(), u.len())?;
        for (ui, d) in u.iter_mut().zip(&ev.tau_extra) {
            *ui += d;
        }
    }
    model.step(x, &u, control_dt)
}

/// Runs the closed loop for `cfg.cycles()` control cycles.
///
/// The solver's `max_iters` is replaced by `cfg.iters_per_cycle` and its
/// early exit is disabled, so every cycle spends exactly the budget.
pub fn run_mpc(
    ocp_template: &OcpDef,
    cfg: &MpcConfig,
    settings: &SolverSettings,
    events: &[DisturbanceEvent],
) -> Result<MpcLog> {
    cfg.validate()?;
    ocp_template.validate()?;
    for ev in events {
        ev.validate(ocp_template.nu())?;
    }
    if ocp_template.dt < cfg.control_dt {
        return Err(invalid("ocp dt must not be smaller than the control step"));
    }
    let settings = match settings {
        SolverSettings::Agd(s) => {
            let s = AgdSettings { max_iters: cfg.iters_per_cycle, grad_tol: 0.0, ..s.clone() };
            s.validate()?;
            SolverSettings::Agd(s)
        }
        SolverSettings::Ddp(s) => {
            let s = DdpSettings { max_iters: cfg.iters_per_cycle, grad_tol: 0.0, ..s.clone() };
            s.validate()?;
            SolverSettings::Ddp(s)
        }
    };

    let mut ocp = ocp_template.clone();
    ocp.preview = cfg.preview_reference;
    let (horizon, nu) = (ocp.horizon, ocp.nu());
    let fraction = cfg.control_dt / ocp.dt;
    let cycles = cfg.cycles();

    let mut x = ocp_template.x0.clone();
    let mut us = ocp.reference_controls();
    let mut adam = AdamState::zeros(horizon, nu);
    let mut last_u = us[0].clone();
    let mut log = MpcLog {
        records: Vec::with_capacity(cycles),
        control_dt: cfg.control_dt,
        seed: cfg.seed,
        solver: settings.kind(),
        status: MpcStatus::Completed,
        divergence_count: 0,
        solves: 0,
        counters: Counters::default(),
    };
    let counters_start = instrument::snapshot();

    for cycle in 0..cycles {
        let t = cycle as f64 * cfg.control_dt;
        ocp.x0.copy_from(&x);
        ocp.base_time = t;
        if !cfg.warm_start {
            us = ocp.reference_controls();
            adam = AdamState::zeros(horizon, nu);
        }

        let start = Instant::now();
        let solved = match &settings {
            SolverSettings::Agd(s) => agd_solve(&ocp, &us, &adam, s).map(|(r, a)| (r, Some(a))),
            SolverSettings::Ddp(s) => ddp_solve(&ocp, &us, s).map(|r| (r, None)),
        };
        let solve_time_s = start.elapsed().as_secs_f64();
        log.solves += 1;

        let (u_applied, iterations, grad_norm) = match solved {
            Ok((res, new_adam)) if res.status != SolveStatus::Diverged => {
                let grad_norm = if cfg.log_grad_norm { ocp.adjoint_gradient(&res.traj)?.norm } else { f64::NAN };
                let SolveResult { traj, iterations_run, .. } = res;
                let u0 = traj.us[0].clone();
                let (next_us, next_adam) = shift_warm_start_by(&traj.us, new_adam.as_ref(), fraction);
                us = next_us;
                if let Some(a) = next_adam {
                    adam = a;
                }
                (u0, iterations_run, grad_norm)
            }
            Ok((res, _)) => {
                log.divergence_count += 1;
                (last_u.clone(), res.iterations_run, f64::NAN)
            }
            Err(Error::Divergence { .. }) => {
                log.divergence_count += 1;
                (last_u.clone(), 0, f64::NAN)
            }
            Err(e) => return Err(e),
        };

        let cost = ocp.cost();
        let running_cost = cost.running(t, &x, &u_applied)?;
        let ee_error = cost.ee_error(t, &x);
        let next = plant_step(&ocp.model, &x, &u_applied, events, t, cfg.control_dt)?;
        log.records.push(MpcRecord {
            t,
            x: x.clone(),
            u_applied: u_applied.clone(),
            running_cost,
            ee_error,
            grad_norm,
            solve_time_s,
            iterations,
        });
        last_u = u_applied;
        if next.iter().any(|v| !v.is_finite()) {
            log.status = MpcStatus::PlantDiverged;
            break;
        }
        x = next;
    }
    log.counters = instrument::snapshot() - counters_start;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcSummary {
    pub mean_running_cost: f64,
    pub rms_ee_error: f64,
    pub max_solve_time_s: f64,
    pub divergence_count: usize,
    /// Seconds after each event's end until tracking recovered; `None` if it never did.
    pub recovery_times: Vec<Option<f64>>,
}

/// Length of the trailing window used to decide recovery, in seconds.
pub const RECOVERY_WINDOW: f64 = 0.5;
/// Length of the pre-disturbance baseline, in seconds.
pub const BASELINE_WINDOW: f64 = 1.0;
/// Recovered once the window RMS error is at most this multiple of the baseline.
pub const RECOVERY_FACTOR: f64 = 2.0;

pub fn metrics(log: &MpcLog, events: &[DisturbanceEvent]) -> MpcSummary {
    let n = log.records.len();
    let mean = |f: &dyn Fn(&MpcRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            log.records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mean_running_cost = mean(&|r| r.running_cost);
    let rms_ee_error = mean(&|r| r.ee_error * r.ee_error).sqrt();
    let max_solve_time_s = log.records.iter().map(|r| r.solve_time_s).fold(0.0, f64::max);

    let mut sq_prefix = Vec::with_capacity(n + 1);
    sq_prefix.push(0.0);
    for r in &log.records {
        sq_prefix.push(sq_prefix.last().unwrap() + r.ee_error * r.ee_error);
    }
    let window_ms = |lo: usize, hi: usize| (sq_prefix[hi] - sq_prefix[lo]) / (hi - lo).max(1) as f64;
    let w = ((RECOVERY_WINDOW / log.control_dt).round() as usize).max(1);

    let recovery_times = events
        .iter()
        .map(|ev| {
            let first_at = |t0: f64| log.records.partition_point(|r| r.t < t0 - 1e-12);
            let (pre_lo, pre_hi) = (first_at(ev.t_start - BASELINE_WINDOW), first_at(ev.t_start));
            let threshold = RECOVERY_FACTOR * RECOVERY_FACTOR * window_ms(pre_lo, pre_hi);
            (first_at(ev.t_end)..n)
                .find(|&j| {
                    let lo = (j + 1).saturating_sub(w);
                    window_ms(lo, j + 1) <= threshold
                })
                .map(|j| (log.records[j].t - ev.t_end).max(0.0))
        })
        .collect();

    MpcSummary {
        mean_running_cost,
        rms_ee_error,
        max_solve_time_s,
        divergence_count: log.divergence_count,
        recovery_times,
    }
}
