//! Accelerated gradient descent over the control sequence.
//!
//! Each iteration takes one adjoint gradient, one ADAM update and one
//! nonlinear rollout. There is no line search: the rollout's cost is
//! recorded but never used to accept or reject a step. The ADAM moments
//! are plain values passed in and returned so a receding-horizon loop can
//! carry them from one solve to the next.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlVec;
use crate::error::{check_len, invalid, Error, Result};
use crate::ocp::{ControlGradient, OcpDef, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgdSettings {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    /// Early exit threshold on the max-abs gradient; 0 disables it.
    pub grad_tol: f64,
}

impl Default for AgdSettings {
    fn default() -> Self {
        AgdSettings { alpha: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_iters: 100, grad_tol: 0.0 }
    }
}

impl AgdSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(invalid("agd alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("agd beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(invalid("agd eps must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("agd max_iters must be positive"));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol >= 0.0) {
            return Err(invalid("agd grad_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// ADAM first and second moments, one entry per control variable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ControlVec>,
    pub v: Vec<ControlVec>,
    /// Bias-correction counter. Kept across warm starts.
    pub step_count: u64,
}

impl AdamState {
    pub fn zeros(horizon: usize, nu: usize) -> Self {
        AdamState { m: vec![ControlVec::zeros(nu); horizon], v: vec![ControlVec::zeros(nu); horizon], step_count: 0 }
    }

    pub fn check_shape(&self, horizon: usize, nu: usize) -> Result<()> {
        check_len("adam m", self.m.len(), horizon)?;
        check_len("adam v", self.v.len(), horizon)?;
        for (m, v) in self.m.iter().zip(&self.v) {
            check_len("adam m entry", m.len(), nu)?;
            check_len("adam v entry", v.len(), nu)?;
        }
        Ok(())
    }

    fn copy_from(&mut self, other: &AdamState) {
        for (dst, src) in self.m.iter_mut().zip(&other.m) {
            dst.copy_from(src);
        }
        for (dst, src) in self.v.iter_mut().zip(&other.v) {
            dst.copy_from(src);
        }
        self.step_count = other.step_count;
    }

    /// Advances the moments with `g` and adds the resulting step into `us`.
    fn apply(&mut self, g: &[ControlVec], s: &AgdSettings, us: &mut [ControlVec]) {
        self.step_count += 1;
        let k = self.step_count as i32;
        let c1 = 1.0 - s.beta1.powi(k);
        let c2 = 1.0 - s.beta2.powi(k);
        for t in 0..g.len() {
            for i in 0..g[t].len() {
                let gi = g[t][i];
                let m = s.beta1 * self.m[t][i] + (1.0 - s.beta1) * gi;
                let v = s.beta2 * self.v[t][i] + (1.0 - s.beta2) * gi * gi;
                self.m[t][i] = m;
                self.v[t][i] = v;
                us[t][i] -= s.alpha * (m / c1) / ((v / c2).sqrt() + s.eps);
            }
        }
    }
}

/// One ADAM step: returns the control increment and the advanced state.
pub fn adam_update(
    state: &AdamState,
    g: &ControlGradient,
    settings: &AgdSettings,
) -> Result<(Vec<ControlVec>, AdamState)> {
    let nu = g.g.first().map_or(0, |v| v.len());
    state.check_shape(g.g.len(), nu)?;
    let mut next = state.clone();
    let mut delta = vec![ControlVec::zeros(nu); g.g.len()];
    next.apply(&g.g, settings, &mut delta);
    Ok((delta, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    MaxIters,
    ToleranceReached,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub cost: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Outcome of either solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub traj: Trajectory,
    pub final_cost: f64,
    /// Norm of the last gradient the solver computed.
    pub grad_norm: f64,
    pub iterations_run: usize,
    pub status: SolveStatus,
    pub per_iter_log: Vec<IterRecord>,
    /// Iterations whose step was taken (AGD takes every step that stays finite).
    pub accepted_steps: usize,
}

/// Runs up to `settings.max_iters` ADAM iterations from `us_init`.
///
/// Divergence of a rollout ends the solve with status `Diverged`, returning
/// the last finite iterate and the moments that produced it. Only a
/// non-finite initial rollout is reported as an error.
pub fn agd_solve(
    ocp: &OcpDef,
    us_init: &[ControlVec],
    adam_init: &AdamState,
    settings: &AgdSettings,
) -> Result<(SolveResult, AdamState)> {
    settings.validate()?;
    ocp.validate()?;
    ocp.check_controls(us_init)?;
    adam_init.check_shape(ocp.horizon, ocp.nu())?;

    let mut traj = ocp.rollout(us_init)?;
    if !traj.cost.is_finite() {
        return Err(Error::Divergence { step: ocp.horizon });
    }
    let mut adam = adam_init.clone();
    let mut backup = adam.clone();
    let mut candidate = traj.us.clone();
    let mut log = Vec::with_capacity(settings.max_iters);
    let mut status = SolveStatus::MaxIters;
    let mut grad_norm = f64::NAN;
    let mut accepted = 0;

    for _ in 0..settings.max_iters {
        let start = Instant::now();
        let g = ocp.adjoint_gradient(&traj)?;
        grad_norm = g.norm;
        if settings.grad_tol > 0.0 && g.norm <= settings.grad_tol {
            status = SolveStatus::ToleranceReached;
            log.push(IterRecord { cost: traj.cost, grad_norm, wall_time_s: start.elapsed().as_secs_f64() });
            break;
        }
        backup.copy_from(&adam);
        for (dst, src) in candidate.iter_mut().zip(&traj.us) {
            dst.copy_from(src);
        }
        adam.apply(&g.g, settings, &mut candidate);
        let finite = candidate.iter().all(|u| u.iter().all(|v| v.is_finite()));
        let outcome = if finite { ocp.rollout(&candidate) } else { Err(Error::Divergence { step: 0 }) };
        match outcome {
            Ok(next) if next.cost.is_finite() => {
                traj = next;
                accepted += 1;
            }
            Ok(_) | Err(Error::Divergence { .. }) => {
                adam.copy_from(&backup);
                status = SolveStatus::Diverged;
            }
            Err(e) => return Err(e),
        }
        log.push(IterRecord { cost: traj.cost, grad_norm, wall_time_s: start.elapsed().as_secs_f64() });
        if status == SolveStatus::Diverged {
            break;
        }
    }

    let result = SolveResult {
        final_cost: traj.cost,
        grad_norm,
        iterations_run: log.len(),
        status,
        per_iter_log: log,
        accepted_steps: accepted,
        traj,
    };
    Ok((result, adam))
}
