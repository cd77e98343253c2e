//! Gauss-Newton DDP (iLQR) baseline.
//!
//! The backward pass is a Riccati sweep over the linearized dynamics and the
//! Gauss-Newton cost Hessians, regularized by `mu * I` on `Quu`. The forward
//! pass rolls the nonlinear model out under the affine feedback policy and a
//! backtracking schedule accepts the first step meeting an Armijo condition
//! against the linear model decrease.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agd::{IterRecord, SolveResult, SolveStatus};
use crate::dynamics::{ControlVec, StateVec};
use crate::error::{check_len, invalid, Error, Result};
use crate::ocp::{OcpDef, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpSettings {
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_factor: f64,
    pub alphas: Vec<f64>,
    pub armijo_c: f64,
    pub max_iters: usize,
    /// Early exit threshold on the max-abs `Qu`; 0 disables it.
    pub grad_tol: f64,
}

impl Default for DdpSettings {
    fn default() -> Self {
        DdpSettings {
            mu_init: 1e-6,
            mu_min: 1e-9,
            mu_max: 1e6,
            mu_factor: 10.0,
            alphas: (0..=10).map(|k| 0.5f64.powi(k)).collect(),
            armijo_c: 1e-4,
            max_iters: 50,
            grad_tol: 0.0,
        }
    }
}

impl DdpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_min > 0.0 && self.mu_min <= self.mu_init && self.mu_init <= self.mu_max && self.mu_max.is_finite())
        {
            return Err(invalid("ddp requires 0 < mu_min <= mu_init <= mu_max < inf"));
        }
        if !(self.mu_factor.is_finite() && self.mu_factor > 1.0) {
            return Err(invalid("ddp mu_factor must exceed 1"));
        }
        if self.alphas.is_empty() {
            return Err(invalid("ddp alphas must not be empty"));
        }
        let in_range = self.alphas.iter().all(|a| *a > 0.0 && *a <= 1.0);
        let decreasing = self.alphas.windows(2).all(|w| w[1] < w[0]);
        if !(in_range && decreasing) {
            return Err(invalid("ddp alphas must be strictly decreasing in (0, 1]"));
        }
        if !(self.armijo_c.is_finite() && self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(invalid("ddp armijo_c must lie in (0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(invalid("ddp max_iters must be positive"));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol >= 0.0) {
            return Err(invalid("ddp grad_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Local quadratic model of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LqStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub stages: Vec<LqStage>,
    pub vx_final: DVector<f64>,
    pub vxx_final: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPassGains {
    pub k: Vec<ControlVec>,
    pub big_k: Vec<DMatrix<f64>>,
    /// Expected change of the cost at step size `a` is `a*dv1 + a^2*dv2`.
    pub dv1: f64,
    pub dv2: f64,
    /// Largest `|Qu|` entry over the horizon.
    pub qu_norm: f64,
}

impl BackwardPassGains {
    pub fn expected_change(&self, alpha: f64) -> f64 {
        alpha * self.dv1 + alpha * alpha * self.dv2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackwardOutcome {
    Gains(BackwardPassGains),
    /// The regularized `Quu` failed to factor at this stage.
    NotPositiveDefinite {
        stage: usize,
    },
}

/// Linearizes dynamics and cost along a feasible trajectory.
pub fn linearize_problem(ocp: &OcpDef, traj: &Trajectory) -> Result<LqProblem> {
    check_len("state sequence", traj.xs.len(), ocp.horizon + 1)?;
    ocp.check_controls(&traj.us)?;
    let cost = ocp.cost();
    let t_end = ocp.horizon;
    let mut stages = Vec::with_capacity(t_end);
    for t in 0..t_end {
        let lin = ocp.model.linearize(&traj.xs[t], &traj.us[t], ocp.dt)?;
        let d = cost.derivatives(ocp.stage_time(t), &traj.xs[t], &traj.us[t], false)?;
        stages.push(LqStage { a: lin.jac.a, b: lin.jac.b, lx: d.lx, lu: d.lu, lxx: d.lxx_gn, luu: d.luu_gn });
    }
    let t_final = ocp.stage_time(t_end);
    let (vx_final, _) = cost.gradient(t_final, &traj.xs[t_end], None)?;
    let (vxx_final, _) = cost.gn_hessians(t_final, &traj.xs[t_end], true)?;
    Ok(LqProblem { stages, vx_final, vxx_final })
}

/// Riccati sweep over a local quadratic model with `mu * I` added to `Quu`.
pub fn riccati_sweep(lq: &LqProblem, mu: f64) -> BackwardOutcome {
    let n = lq.stages.len();
    let mut vx = lq.vx_final.clone();
    let mut vxx = lq.vxx_final.clone();
    let mut k = vec![ControlVec::zeros(0); n];
    let mut big_k = vec![DMatrix::zeros(0, 0); n];
    let (mut dv1, mut dv2, mut qu_norm) = (0.0, 0.0, 0.0f64);

    for t in (0..n).rev() {
        let s = &lq.stages[t];
        let qx = &s.lx + s.a.tr_mul(&vx);
        let qu = &s.lu + s.b.tr_mul(&vx);
        let vxx_a = &vxx * &s.a;
        let qxx = &s.lxx + s.a.tr_mul(&vxx_a);
        let qux = s.b.tr_mul(&vxx_a);
        let mut quu = &s.luu + s.b.tr_mul(&(&vxx * &s.b));
        for i in 0..quu.nrows() {
            quu[(i, i)] += mu;
        }
        let Some(chol) = quu.clone().cholesky() else {
            return BackwardOutcome::NotPositiveDefinite { stage: t };
        };
        let kt = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        if kt.iter().chain(kk.iter()).any(|v| !v.is_finite()) {
            return BackwardOutcome::NotPositiveDefinite { stage: t };
        }
        qu_norm = qu_norm.max(qu.amax());
        dv1 += kt.dot(&qu);
        dv2 += 0.5 * kt.dot(&(&quu * &kt));

        let quu_k = &quu * &kt;
        vx = qx + kk.tr_mul(&quu_k) + kk.tr_mul(&qu) + qux.tr_mul(&kt);
        let kt_qux = kk.tr_mul(&qux);
        let new_vxx = qxx + kk.tr_mul(&(&quu * &kk)) + &kt_qux + kt_qux.transpose();
        vxx = (&new_vxx + new_vxx.transpose()) * 0.5;
        k[t] = kt;
        big_k[t] = kk;
    }
    BackwardOutcome::Gains(BackwardPassGains { k, big_k, dv1, dv2, qu_norm })
}

pub fn backward_pass(ocp: &OcpDef, traj: &Trajectory, mu: f64) -> Result<BackwardOutcome> {
    Ok(riccati_sweep(&linearize_problem(ocp, traj)?, mu))
}

/// Nonlinear rollout under `u = u_bar + alpha*k + K*(x - x_bar)`.
pub fn forward_pass(ocp: &OcpDef, traj: &Trajectory, gains: &BackwardPassGains, alpha: f64) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("forward pass step size must lie in [0, 1]"));
    }
    check_len("feedforward gains", gains.k.len(), ocp.horizon)?;
    check_len("feedback gains", gains.big_k.len(), ocp.horizon)?;
    check_len("state sequence", traj.xs.len(), ocp.horizon + 1)?;
    let mut xs: Vec<StateVec> = Vec::with_capacity(ocp.horizon + 1);
    let mut us = Vec::with_capacity(ocp.horizon);
    xs.push(ocp.x0.clone());
    for t in 0..ocp.horizon {
        let mut u = &traj.us[t] + &gains.k[t] * alpha;
        u.gemv(1.0, &gains.big_k[t], &(&xs[t] - &traj.xs[t]), 1.0);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        let mut next = StateVec::zeros(ocp.nx());
        ocp.model.step_into(xs[t].as_slice(), u.as_slice(), ocp.dt, next.as_mut_slice())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        xs.push(next);
        us.push(u);
    }
    let mut out = Trajectory { xs, us, cost: 0.0 };
    out.cost = ocp.total_cost(&out)?;
    Ok(out)
}

/// Runs up to `settings.max_iters` DDP iterations from `us_init`.
///
/// An iteration is one backward pass (with as many regularization raises as
/// it takes to factor) followed by one line search.
pub fn ddp_solve(ocp: &OcpDef, us_init: &[ControlVec], settings: &DdpSettings) -> Result<SolveResult> {
    settings.validate()?;
    ocp.validate()?;
    let mut traj = ocp.rollout(us_init)?;
    if !traj.cost.is_finite() {
        return Err(Error::Divergence { step: ocp.horizon });
    }
    let mut mu = settings.mu_init;
    let mut log = Vec::with_capacity(settings.max_iters);
    let mut status = SolveStatus::MaxIters;
    let mut grad_norm = f64::NAN;
    let mut accepted = 0;

    'outer: for _ in 0..settings.max_iters {
        let start = Instant::now();
        let lq = linearize_problem(ocp, &traj)?;
        let gains = loop {
            match riccati_sweep(&lq, mu) {
                BackwardOutcome::Gains(g) => break g,
                BackwardOutcome::NotPositiveDefinite { .. } => {
                    mu *= settings.mu_factor;
                    if mu > settings.mu_max {
                        status = SolveStatus::Diverged;
                        log.push(IterRecord { cost: traj.cost, grad_norm, wall_time_s: start.elapsed().as_secs_f64() });
                        break 'outer;
                    }
                }
            }
        };
        grad_norm = gains.qu_norm;
        if settings.grad_tol > 0.0 && grad_norm <= settings.grad_tol {
            status = SolveStatus::ToleranceReached;
            log.push(IterRecord { cost: traj.cost, grad_norm, wall_time_s: start.elapsed().as_secs_f64() });
            break;
        }

        let mut step = None;
        for &alpha in &settings.alphas {
            match forward_pass(ocp, &traj, &gains, alpha) {
                Ok(cand) if cand.cost.is_finite() => {
                    if traj.cost - cand.cost >= settings.armijo_c * alpha * (-gains.dv1) && cand.cost < traj.cost {
                        step = Some(cand);
                        break;
                    }
                }
                Ok(_) | Err(Error::Divergence { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        match step {
            Some(cand) => {
                traj = cand;
                accepted += 1;
                mu = (mu / settings.mu_factor).max(settings.mu_min);
            }
            None if -gains.dv1 <= 16.0 * f64::EPSILON * traj.cost.abs().max(f64::MIN_POSITIVE) => {
                // The predicted decrease is below the cost's resolution, so
                // there is nothing left to gain. With early exit disabled the
                // iteration still counts against the budget.
                if settings.grad_tol > 0.0 {
                    status = SolveStatus::ToleranceReached;
                }
            }
            None => {
                mu *= settings.mu_factor;
                if mu > settings.mu_max {
                    status = SolveStatus::Diverged;
                }
            }
        }
        log.push(IterRecord { cost: traj.cost, grad_norm, wall_time_s: start.elapsed().as_secs_f64() });
        if status != SolveStatus::MaxIters {
            break;
        }
    }

    Ok(SolveResult {
        final_cost: traj.cost,
        grad_norm,
        iterations_run: log.len(),
        status,
        per_iter_log: log,
        accepted_steps: accepted,
        traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostWeights, ReferenceSpec};
    use crate::dynamics::ModelSpec;
    use crate::instrument;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    /// x' = x + u with Q = R = 1 and terminal weight P = 1, one stage.
    fn scalar_stage(qu_offset: f64) -> LqProblem {
        LqProblem {
            stages: vec![LqStage {
                a: m1(1.0),
                b: m1(1.0),
                lx: v1(0.0),
                lu: v1(qu_offset),
                lxx: m1(1.0),
                luu: m1(1.0),
            }],
            vx_final: v1(0.0),
            vxx_final: m1(1.0),
        }
    }

    fn value_hessian(lq: &LqProblem, g: &BackwardPassGains) -> f64 {
        let s = &lq.stages[0];
        let p = lq.vxx_final[(0, 0)];
        let (qxx, quu, qux) = (s.lxx[(0, 0)] + p, s.luu[(0, 0)] + p, p);
        let kk = g.big_k[0][(0, 0)];
        qxx + kk * quu * kk + 2.0 * kk * qux
    }

    #[test]
    fn scalar_riccati_by_hand() {
        let lq = scalar_stage(0.0);
        let BackwardOutcome::Gains(g) = riccati_sweep(&lq, 0.0) else { panic!() };
        assert!((g.big_k[0][(0, 0)] + 0.5).abs() < 1e-15);
        assert!((value_hessian(&lq, &g) - 1.5).abs() < 1e-15);
        assert_eq!(g.k[0][0], 0.0);
        assert_eq!((g.dv1, g.dv2), (0.0, 0.0));
    }

    #[test]
    fn scalar_expected_decrease() {
        let BackwardOutcome::Gains(g) = riccati_sweep(&scalar_stage(1.0), 0.0) else { panic!() };
        assert!((g.k[0][0] + 0.5).abs() < 1e-15);
        assert!((g.dv1 + 0.5).abs() < 1e-15);
        assert!((g.dv2 - 0.25).abs() < 1e-15);
        assert!((g.expected_change(1.0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn indefinite_quu_is_signalled() {
        let mut lq = scalar_stage(0.0);
        lq.stages[0].luu = m1(-5.0);
        assert_eq!(riccati_sweep(&lq, 0.0), BackwardOutcome::NotPositiveDefinite { stage: 0 });
        assert!(matches!(riccati_sweep(&lq, 10.0), BackwardOutcome::Gains(_)));
    }

    fn di_lqr(horizon: usize) -> OcpDef {
        let m = ModelSpec::double_integrator();
        let w = CostWeights { q_diag: vec![1.0, 0.5], r_diag: vec![0.1], w_ee: 0.0, terminal_scale: 10.0 };
        OcpDef::new(m.clone(), w, ReferenceSpec::regulation(&m), horizon, 0.1, DVector::from_column_slice(&[1.0, -0.5]))
            .unwrap()
    }

    fn exact_settings() -> DdpSettings {
        DdpSettings { mu_init: 1e-12, mu_min: 1e-12, max_iters: 5, grad_tol: 1e-9, ..DdpSettings::default() }
    }

    #[test]
    fn lqr_solved_in_one_step() {
        let ocp = di_lqr(20);
        let res = ddp_solve(&ocp, &ocp.zero_controls(), &exact_settings()).unwrap();
        assert_eq!(res.accepted_steps, 1);
        assert_eq!(res.status, SolveStatus::ToleranceReached);
        assert!(res.grad_norm <= 1e-9, "{}", res.grad_norm);
    }

    #[test]
    fn start_at_optimum_takes_no_steps() {
        let ocp = di_lqr(20);
        let first = ddp_solve(&ocp, &ocp.zero_controls(), &exact_settings()).unwrap();
        let again = ddp_solve(&ocp, &first.traj.us, &exact_settings()).unwrap();
        assert_eq!(again.accepted_steps, 0);
        assert_eq!(again.iterations_run, 1);
        assert_eq!(again.status, SolveStatus::ToleranceReached);
    }

    #[test]
    fn null_step_reproduces_trajectory() {
        let ocp = di_lqr(10);
        let traj = ocp.rollout(&vec![v1(0.3); 10]).unwrap();
        let BackwardOutcome::Gains(mut g) = backward_pass(&ocp, &traj, 1e-6).unwrap() else { panic!() };
        for kk in &mut g.big_k {
            kk.fill(0.0);
        }
        let same = forward_pass(&ocp, &traj, &g, 0.0).unwrap();
        assert_eq!(same.xs, traj.xs);
        assert!((same.cost - traj.cost).abs() <= 1e-15);
    }

    #[test]
    fn candidates_are_feasible() {
        let m = ModelSpec::planar_arm(&[0.5, 0.4], &[1.0, 0.8], &[0.5, 0.5], 0.1).unwrap();
        let w =
            CostWeights { q_diag: vec![1.0, 1.0, 0.1, 0.1], r_diag: vec![0.01; 2], w_ee: 0.0, terminal_scale: 10.0 };
        let x0 = DVector::from_column_slice(&[0.3, 0.2, 0.0, 0.0]);
        let ocp = OcpDef::new(m.clone(), w, ReferenceSpec::regulation(&m), 30, 0.01, x0).unwrap();
        let traj = ocp.rollout(&ocp.zero_controls()).unwrap();
        let BackwardOutcome::Gains(g) = backward_pass(&ocp, &traj, 1e-6).unwrap() else { panic!() };
        for alpha in [1.0, 0.5, 0.125] {
            let cand = forward_pass(&ocp, &traj, &g, alpha).unwrap();
            assert!(ocp.feasibility_residual(&cand).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn accepted_steps_decrease_cost_and_value_hessian_stays_symmetric() {
        let m = ModelSpec::planar_arm(&[0.5, 0.4], &[1.0, 0.8], &[0.5, 0.5], 0.1).unwrap();
        let w =
            CostWeights { q_diag: vec![5.0, 5.0, 0.1, 0.1], r_diag: vec![0.01; 2], w_ee: 0.0, terminal_scale: 10.0 };
        let x0 = DVector::from_column_slice(&[1.2, -0.7, 0.0, 0.0]);
        let ocp = OcpDef::new(m.clone(), w, ReferenceSpec::regulation(&m), 30, 0.01, x0).unwrap();
        let res =
            ddp_solve(&ocp, &ocp.zero_controls(), &DdpSettings { max_iters: 20, ..DdpSettings::default() }).unwrap();
        let mut prev = ocp.rollout(&ocp.zero_controls()).unwrap().cost;
        for rec in &res.per_iter_log {
            assert!(rec.cost <= prev);
            prev = rec.cost;
        }
        assert!(res.accepted_steps > 0);
    }

    #[test]
    fn uses_second_order_information() {
        let ocp = di_lqr(10);
        let before = instrument::snapshot();
        ddp_solve(&ocp, &ocp.zero_controls(), &DdpSettings { max_iters: 2, ..DdpSettings::default() }).unwrap();
        let used = instrument::snapshot() - before;
        assert_eq!(used.gn_hessian_evals, 2 * 11);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = [
            DdpSettings { mu_min: 0.0, ..DdpSettings::default() },
            DdpSettings { mu_init: 1e7, ..DdpSettings::default() },
            DdpSettings { alphas: vec![1.0, 1.0], ..DdpSettings::default() },
            DdpSettings { alphas: vec![1.5], ..DdpSettings::default() },
            DdpSettings { mu_factor: 1.0, ..DdpSettings::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err());
        }
    }
}
