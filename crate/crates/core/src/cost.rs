//! Stage and terminal costs: state regularization, torque regularization
//! and end-effector position tracking.
//!
//! ```text
//! l(x, u, t) = 1/2 |x - x_ref|_Q^2 + 1/2 |u - u_ref|_R^2 + 1/2 w_ee |p(q) - p*(t)|^2
//! ```
//!
//! The cost is separable in `x` and `u`, so the cross term `l_ux` is zero
//! and never stored. Hessians are Gauss-Newton: the tracking term
//! contributes `w_ee J^T J` with `J` the end-effector Jacobian padded with
//! zeros over the velocity coordinates.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlVec, ModelSpec, StateVec};
use crate::error::{check_finite, check_len, invalid, Result};
use crate::instrument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default)]
    pub w_ee: f64,
    #[serde(default = "one")]
    pub terminal_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EeMode {
    #[default]
    Off,
    FixedPoint,
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
    #[serde(default)]
    pub ee_mode: EeMode,
    #[serde(default)]
    pub fixed_point: [f64; 2],
    #[serde(default)]
    pub circle_center: [f64; 2],
    #[serde(default)]
    pub circle_radius: f64,
    #[serde(default)]
    pub circle_omega: f64,
    #[serde(default)]
    pub circle_phase: f64,
}

/// First-order terms and Gauss-Newton Hessians of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx_gn: DMatrix<f64>,
    pub luu_gn: DMatrix<f64>,
}

impl CostWeights {
    pub fn zeros(model: &ModelSpec) -> Self {
        CostWeights { q_diag: vec![0.0; model.nx()], r_diag: vec![1.0; model.nu()], w_ee: 0.0, terminal_scale: 1.0 }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        check_len("q_diag", self.q_diag.len(), model.nx())?;
        check_len("r_diag", self.r_diag.len(), model.nu())?;
        if self.q_diag.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(invalid("q_diag entries must be finite and nonnegative"));
        }
        if self.r_diag.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(invalid("r_diag entries must be finite and positive"));
        }
        if !(self.w_ee.is_finite() && self.w_ee >= 0.0) {
            return Err(invalid("w_ee must be finite and nonnegative"));
        }
        if !(self.terminal_scale.is_finite() && self.terminal_scale >= 0.0) {
            return Err(invalid("terminal_scale must be finite and nonnegative"));
        }
        Ok(())
    }
}

impl ReferenceSpec {
    /// Zero state and control references, tracking disabled.
    pub fn regulation(model: &ModelSpec) -> Self {
        ReferenceSpec {
            x_ref: vec![0.0; model.nx()],
            u_ref: vec![0.0; model.nu()],
            ee_mode: EeMode::Off,
            fixed_point: [0.0; 2],
            circle_center: [0.0; 2],
            circle_radius: 0.0,
            circle_omega: 0.0,
            circle_phase: 0.0,
        }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        check_len("x_ref", self.x_ref.len(), model.nx())?;
        check_len("u_ref", self.u_ref.len(), model.nu())?;
        check_finite("x_ref", &self.x_ref)?;
        check_finite("u_ref", &self.u_ref)?;
        check_finite("fixed_point", &self.fixed_point)?;
        check_finite("circle_center", &self.circle_center)?;
        check_finite("circle", &[self.circle_omega, self.circle_phase])?;
        if !(self.circle_radius.is_finite() && self.circle_radius >= 0.0) {
            return Err(invalid("circle_radius must be nonnegative"));
        }
        Ok(())
    }

    /// Point on the reference circle at time `t`.
    pub fn circle_reference(&self, t: f64) -> Result<Vector2<f64>> {
        if self.ee_mode != EeMode::Circle {
            return Err(invalid("circle_reference requires ee_mode = circle"));
        }
        Ok(self.circle_point(t))
    }

    fn circle_point(&self, t: f64) -> Vector2<f64> {
        let phase = self.circle_omega * t + self.circle_phase;
        Vector2::new(self.circle_center[0], self.circle_center[1])
            + self.circle_radius * Vector2::new(phase.cos(), phase.sin())
    }

    /// End-effector target at time `t`, or `None` when tracking is off.
    pub fn ee_target(&self, t: f64) -> Option<Vector2<f64>> {
        match self.ee_mode {
            EeMode::Off => None,
            EeMode::FixedPoint => Some(Vector2::new(self.fixed_point[0], self.fixed_point[1])),
            EeMode::Circle => Some(self.circle_point(t)),
        }
    }
}

/// Borrowed view tying weights and references to a model.
#[derive(Debug, Clone, Copy)]
pub struct StageCost<'a> {
    pub weights: &'a CostWeights,
    pub refs: &'a ReferenceSpec,
    pub model: &'a ModelSpec,
}

impl<'a> StageCost<'a> {
    pub fn new(weights: &'a CostWeights, refs: &'a ReferenceSpec, model: &'a ModelSpec) -> Self {
        StageCost { weights, refs, model }
    }

    fn check_x(&self, x: &StateVec) -> Result<()> {
        check_len("state", x.len(), self.weights.q_diag.len())?;
        check_len("state reference", self.refs.x_ref.len(), x.len())
    }

    fn check_u(&self, u: &ControlVec) -> Result<()> {
        check_len("control", u.len(), self.weights.r_diag.len())?;
        check_len("control reference", self.refs.u_ref.len(), u.len())
    }

    /// Tracking residual `p(q) - p*(t)` when the term is active.
    fn ee_residual(&self, t: f64, x: &StateVec) -> Option<Vector2<f64>> {
        if !self.model.has_end_effector() || self.weights.w_ee == 0.0 {
            return None;
        }
        let target = self.refs.ee_target(t)?;
        Some(self.model.ee_position_unchecked(&x.as_slice()[..self.model.dof()]) - target)
    }

    /// End-effector position error in meters at time `t` (0 when tracking is inactive).
    pub fn ee_error(&self, t: f64, x: &StateVec) -> f64 {
        if !self.model.has_end_effector() {
            return 0.0;
        }
        match self.refs.ee_target(t) {
            Some(target) => (self.model.ee_position_unchecked(&x.as_slice()[..self.model.dof()]) - target).norm(),
            None => 0.0,
        }
    }

    fn state_terms(&self, t: f64, x: &StateVec) -> f64 {
        let state: f64 = (0..x.len())
            .map(|i| {
                let d = x[i] - self.refs.x_ref[i];
                self.weights.q_diag[i] * d * d
            })
            .sum();
        let ee = self.ee_residual(t, x).map_or(0.0, |r| self.weights.w_ee * r.norm_squared());
        0.5 * (state + ee)
    }

    pub fn running(&self, t: f64, x: &StateVec, u: &ControlVec) -> Result<f64> {
        self.check_x(x)?;
        self.check_u(u)?;
        let control: f64 = (0..u.len())
            .map(|i| {
                let d = u[i] - self.refs.u_ref[i];
                self.weights.r_diag[i] * d * d
            })
            .sum();
        Ok(self.state_terms(t, x) + 0.5 * control)
    }

    pub fn terminal(&self, t_final: f64, x: &StateVec) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.weights.terminal_scale * self.state_terms(t_final, x))
    }

    /// `(l_x, l_u)`. Pass `u = None` for the terminal stage (`l_u` is then zero).
    pub fn gradient(&self, t: f64, x: &StateVec, u: Option<&ControlVec>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_x(x)?;
        let nu = self.weights.r_diag.len();
        let scale = if u.is_some() { 1.0 } else { self.weights.terminal_scale };
        let mut lx = DVector::from_fn(x.len(), |i, _| scale * self.weights.q_diag[i] * (x[i] - self.refs.x_ref[i]));
        if let Some(r) = self.ee_residual(t, x) {
            let jac = self.model.ee_jacobian_unchecked(&x.as_slice()[..self.model.dof()]);
            let w = scale * self.weights.w_ee;
            for j in 0..self.model.dof() {
                lx[j] += w * (jac[(0, j)] * r[0] + jac[(1, j)] * r[1]);
            }
        }
        let lu = match u {
            Some(u) => {
                self.check_u(u)?;
                DVector::from_fn(nu, |i, _| self.weights.r_diag[i] * (u[i] - self.refs.u_ref[i]))
            }
            None => DVector::zeros(nu),
        };
        Ok((lx, lu))
    }

    /// Gauss-Newton `(l_xx, l_uu)`; the terminal stage scales `l_xx` and zeroes `l_uu`.
    pub fn gn_hessians(&self, t: f64, x: &StateVec, terminal: bool) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_x(x)?;
        instrument::gn_hessian();
        let nx = x.len();
        let nu = self.weights.r_diag.len();
        let scale = if terminal { self.weights.terminal_scale } else { 1.0 };
        let mut lxx = DMatrix::from_diagonal(&DVector::from_fn(nx, |i, _| scale * self.weights.q_diag[i]));
        if self.ee_residual(t, x).is_some() {
            let n = self.model.dof();
            let jac = self.model.ee_jacobian_unchecked(&x.as_slice()[..n]);
            let jtj = jac.transpose() * &jac;
            let w = scale * self.weights.w_ee;
            for i in 0..n {
                for j in 0..n {
                    lxx[(i, j)] += w * jtj[(i, j)];
                }
            }
        }
        let luu = if terminal {
            DMatrix::zeros(nu, nu)
        } else {
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.weights.r_diag))
        };
        Ok((lxx, luu))
    }

    pub fn derivatives(&self, t: f64, x: &StateVec, u: &ControlVec, is_terminal: bool) -> Result<CostDerivatives> {
        let (lx, lu) = self.gradient(t, x, (!is_terminal).then_some(u))?;
        let (lxx_gn, luu_gn) = self.gn_hessians(t, x, is_terminal)?;
        Ok(CostDerivatives { lx, lu, lxx_gn, luu_gn })
    }
}
