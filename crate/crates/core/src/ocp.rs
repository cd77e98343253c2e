//! Single-shooting optimal control problems.
//!
//! Controls are the only decision variables. A rollout integrates the
//! nonlinear model forward, so every trajectory handed around is
//! dynamically feasible by construction. The control gradient comes from a
//! backward costate sweep built on matrix-vector products alone:
//!
//! ```text
//! lambda_T = dphi/dx(x_T)
//! g_t      = l_u(t) + B_t^T lambda_{t+1}
//! lambda_t = l_x(t) + A_t^T lambda_{t+1}
//! ```

use crate::cost::{CostWeights, ReferenceSpec, StageCost};
use crate::dynamics::{ControlVec, Linearization, ModelSpec, StateVec};
use crate::error::{check_finite, check_len, invalid, Error, Result};
use crate::instrument;

/// Relative tolerance for accepting a trajectory as a rollout of its controls.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OcpDef {
    pub model: ModelSpec,
    pub weights: CostWeights,
    pub refs: ReferenceSpec,
    /// Number of control steps `T`.
    pub horizon: usize,
    pub dt: f64,
    pub x0: StateVec,
    /// Absolute time of stage 0, used by time-indexed references.
    pub base_time: f64,
    /// Evaluate references at `base_time + k dt`; when false every stage sees `base_time`.
    pub preview: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<StateVec>,
    pub us: Vec<ControlVec>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostateSequence {
    pub lambdas: Vec<StateVec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlGradient {
    pub g: Vec<ControlVec>,
    /// Max-abs entry over the whole sequence.
    pub norm: f64,
}

impl ControlGradient {
    pub fn from_parts(g: Vec<ControlVec>) -> Self {
        let norm = max_abs(&g);
        ControlGradient { g, norm }
    }
}

pub(crate) fn max_abs(seq: &[ControlVec]) -> f64 {
    seq.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
}

impl OcpDef {
    pub fn new(
        model: ModelSpec,
        weights: CostWeights,
        refs: ReferenceSpec,
        horizon: usize,
        dt: f64,
        x0: StateVec,
    ) -> Result<Self> {
        let ocp = OcpDef { model, weights, refs, horizon, dt, x0, base_time: 0.0, preview: true };
        ocp.validate()?;
        Ok(ocp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        if !self.base_time.is_finite() {
            return Err(invalid("base_time must be finite"));
        }
        check_len("x0", self.x0.len(), self.model.nx())?;
        check_finite("x0", self.x0.as_slice())?;
        self.weights.validate(&self.model)?;
        self.refs.validate(&self.model)
    }

    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nu(&self) -> usize {
        self.model.nu()
    }

    pub fn stage_time(&self, k: usize) -> f64 {
        if self.preview {
            self.base_time + k as f64 * self.dt
        } else {
            self.base_time
        }
    }

    pub fn cost(&self) -> StageCost<'_> {
        StageCost::new(&self.weights, &self.refs, &self.model)
    }

    /// `T` copies of the control reference.
    pub fn reference_controls(&self) -> Vec<ControlVec> {
        vec![ControlVec::from_column_slice(&self.refs.u_ref); self.horizon]
    }

    pub fn zero_controls(&self) -> Vec<ControlVec> {
        vec![ControlVec::zeros(self.nu()); self.horizon]
    }

    pub fn check_controls(&self, us: &[ControlVec]) -> Result<()> {
        check_len("control sequence", us.len(), self.horizon)?;
        for u in us {
            check_len("control", u.len(), self.nu())?;
            check_finite("control", u.as_slice())?;
        }
        Ok(())
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        check_len("state sequence", traj.xs.len(), self.horizon + 1)?;
        for x in &traj.xs {
            check_len("state", x.len(), self.nx())?;
        }
        self.check_controls(&traj.us)
    }

    /// Forward pass from `x0`; the returned trajectory carries its total cost.
    pub fn rollout(&self, us: &[ControlVec]) -> Result<Trajectory> {
        self.check_controls(us)?;
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(self.x0.clone());
        for (t, u) in us.iter().enumerate() {
            let mut next = StateVec::zeros(self.nx());
            self.model.step_into(xs[t].as_slice(), u.as_slice(), self.dt, next.as_mut_slice())?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: t });
            }
            xs.push(next);
        }
        let mut traj = Trajectory { xs, us: us.to_vec(), cost: 0.0 };
        traj.cost = self.total_cost(&traj)?;
        Ok(traj)
    }

    pub fn total_cost(&self, traj: &Trajectory) -> Result<f64> {
        self.check_trajectory(traj)?;
        instrument::objective();
        let cost = self.cost();
        let mut total = 0.0;
        for t in 0..self.horizon {
            total += cost.running(self.stage_time(t), &traj.xs[t], &traj.us[t])?;
        }
        total += cost.terminal(self.stage_time(self.horizon), &traj.xs[self.horizon])?;
        Ok(total)
    }

    /// Largest relative mismatch between `xs[t+1]` and `step(xs[t], us[t])`.
    pub fn feasibility_residual(&self, traj: &Trajectory) -> Result<f64> {
        self.check_trajectory(traj)?;
        let mut worst = (traj.xs[0].clone() - &self.x0).amax();
        for t in 0..self.horizon {
            let next = self.model.step(&traj.xs[t], &traj.us[t], self.dt)?;
            worst = worst.max(relative_gap(&next, &traj.xs[t + 1]));
        }
        Ok(worst)
    }

    pub fn adjoint_gradient(&self, traj: &Trajectory) -> Result<ControlGradient> {
        Ok(self.adjoint_pass(traj)?.0)
    }

    pub fn adjoint_pass(&self, traj: &Trajectory) -> Result<(ControlGradient, CostateSequence)> {
        self.adjoint_pass_with(traj, |m, x, u, dt| m.linearize(x, u, dt))
    }

    /// Costate sweep with a caller-supplied linearization, which is the seam
    /// the gradient checker uses to inject faults.
    pub fn adjoint_pass_with<F>(&self, traj: &Trajectory, linearize: F) -> Result<(ControlGradient, CostateSequence)>
    where
        F: Fn(&ModelSpec, &StateVec, &ControlVec, f64) -> Result<Linearization>,
    {
        self.check_trajectory(traj)?;
        let t_end = self.horizon;
        let cost = self.cost();
        let (mut lambda, _) = cost.gradient(self.stage_time(t_end), &traj.xs[t_end], None)?;
        let mut lambdas = vec![StateVec::zeros(0); t_end + 1];
        let mut g = vec![ControlVec::zeros(0); t_end];
        for t in (0..t_end).rev() {
            let lin = linearize(&self.model, &traj.xs[t], &traj.us[t], self.dt)?;
            if relative_gap(&lin.next, &traj.xs[t + 1]) > FEASIBILITY_TOL {
                return Err(invalid(format!("trajectory is not a rollout of its controls at step {t}")));
            }
            let (lx, mut lu) = cost.gradient(self.stage_time(t), &traj.xs[t], Some(&traj.us[t]))?;
            lu.gemv_tr(1.0, &lin.jac.b, &lambda, 1.0);
            g[t] = lu;
            let mut next_lambda = lx;
            next_lambda.gemv_tr(1.0, &lin.jac.a, &lambda, 1.0);
            lambdas[t + 1] = std::mem::replace(&mut lambda, next_lambda);
        }
        lambdas[0] = lambda;
        Ok((ControlGradient::from_parts(g), CostateSequence { lambdas }))
    }
}

fn relative_gap(a: &StateVec, b: &StateVec) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
