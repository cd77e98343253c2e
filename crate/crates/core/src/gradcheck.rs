//! Finite-difference verification of every first-order quantity the solvers use.
//!
//! Errors are reported as `max|exact - fd| / max|fd|` over all entries of an
//! instance, maximized over instances.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::{CostWeights, EeMode, ReferenceSpec};
use crate::dynamics::{ControlVec, Linearization, ModelKind, ModelSpec, StateVec, FD_STEP};
use crate::error::{invalid, Result};
use crate::ocp::{max_abs, OcpDef};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Negative control: scales every `B` by 1.5 before use.
    pub corrupt_jacobian: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { instances: 20, horizon: 30, dt: 0.01, seed: 0, threshold: 1e-4, corrupt_jacobian: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub model: ModelKind,
    pub check: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn default_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::double_integrator(),
        ModelSpec::pendulum(1.0, 0.9, 0.8, 0.1).expect("valid pendulum"),
        ModelSpec::planar_arm(&[0.4, 0.35, 0.25], &[2.0, 1.5, 0.8], &[0.5, 0.5, 0.5], 0.1).expect("valid arm"),
    ]
}

/// Runs the adjoint, cost-derivative and dynamics-Jacobian checks on each model.
pub fn run_gradcheck(models: &[ModelSpec], opts: &GradcheckOptions) -> Result<Vec<CheckLine>> {
    if opts.instances == 0 || opts.horizon == 0 || opts.dt.is_nan() || opts.dt <= 0.0 {
        return Err(invalid("gradcheck needs positive instances, horizon and dt"));
    }
    let corrupt = opts.corrupt_jacobian;
    let linearize = move |m: &ModelSpec, x: &StateVec, u: &ControlVec, dt: f64| -> Result<Linearization> {
        let mut lin = m.linearize(x, u, dt)?;
        if corrupt {
            lin.jac.b *= 1.5;
        }
        Ok(lin)
    };

    let mut lines = Vec::new();
    for (k, m) in models.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
        let (mut adjoint, mut cost, mut jac) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..opts.instances {
            let ocp = random_instance(m, opts, &mut rng)?;
            let us: Vec<ControlVec> =
                (0..opts.horizon).map(|_| DVector::from_fn(m.nu(), |_, _| rng.random_range(-2.0..2.0))).collect();
            let traj = ocp.rollout(&us)?;
            let (g, _) = ocp.adjoint_pass_with(&traj, linearize)?;
            let fd = fd_control_gradient(&ocp, &us)?;
            let diff = g.g.iter().zip(&fd).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            adjoint = adjoint.max(rel(diff, max_abs(&fd)));

            let t = rng.random_range(0.0..3.0);
            let (x, u) = (&traj.xs[opts.horizon / 2], &us[opts.horizon / 2]);
            cost = cost.max(cost_error(&ocp, t, x, u)?);

            let lin = linearize(m, x, u, ocp.dt)?;
            let fd_jac = m.fd_jacobians(x, u, ocp.dt, FD_STEP)?;
            let diff = (&lin.jac.a - &fd_jac.a).amax().max((&lin.jac.b - &fd_jac.b).amax());
            jac = jac.max(rel(diff, fd_jac.a.amax().max(fd_jac.b.amax())));
        }
        for (check, err) in [("adjoint_gradient", adjoint), ("cost_gradient", cost), ("dynamics_jacobian", jac)] {
            lines.push(CheckLine { model: m.kind(), check, max_rel_err: err, passed: err <= opts.threshold });
        }
    }
    Ok(lines)
}

fn rel(diff: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

fn random_instance(m: &ModelSpec, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<OcpDef> {
    let (nx, nu) = (m.nx(), m.nu());
    let w = CostWeights {
        q_diag: (0..nx).map(|_| rng.random_range(0.0..2.0)).collect(),
        r_diag: (0..nu).map(|_| rng.random_range(0.1..1.0)).collect(),
        w_ee: if m.has_end_effector() { rng.random_range(1.0..50.0) } else { 0.0 },
        terminal_scale: rng.random_range(0.5..5.0),
    };
    let reach: f64 = m.link_lengths().iter().sum();
    let refs = ReferenceSpec {
        x_ref: (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect(),
        u_ref: (0..nu).map(|_| rng.random_range(-0.5..0.5)).collect(),
        ee_mode: if m.has_end_effector() { EeMode::Circle } else { EeMode::Off },
        circle_center: [0.5 * reach, 0.1 * reach],
        circle_radius: 0.2 * reach,
        circle_omega: rng.random_range(0.5..4.0),
        circle_phase: rng.random_range(0.0..6.0),
        ..ReferenceSpec::regulation(m)
    };
    let x0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
    OcpDef::new(m.clone(), w, refs, opts.horizon, opts.dt, x0)
}

/// Central differences of the rolled-out total cost.
pub fn fd_control_gradient(ocp: &OcpDef, us: &[ControlVec]) -> Result<Vec<ControlVec>> {
    let mut work = us.to_vec();
    let mut out = Vec::with_capacity(us.len());
    for t in 0..us.len() {
        let mut g = us[t].clone();
        for i in 0..us[t].len() {
            work[t][i] = us[t][i] + FD_STEP;
            let jp = ocp.rollout(&work)?.cost;
            work[t][i] = us[t][i] - FD_STEP;
            let jm = ocp.rollout(&work)?.cost;
            work[t][i] = us[t][i];
            g[i] = (jp - jm) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    Ok(out)
}

fn cost_error(ocp: &OcpDef, t: f64, x: &StateVec, u: &ControlVec) -> Result<f64> {
    let c = ocp.cost();
    let (lx, lu) = c.gradient(t, x, Some(u))?;
    let (lx_term, _) = c.gradient(t, x, None)?;
    let mut fd_x = DVector::zeros(x.len());
    let mut fd_term = DVector::zeros(x.len());
    let mut fd_u = DVector::zeros(u.len());
    let (mut xp, mut up) = (x.clone(), u.clone());
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let (rp, tp) = (c.running(t, &xp, u)?, c.terminal(t, &xp)?);
        xp[i] = x[i] - FD_STEP;
        let (rm, tm) = (c.running(t, &xp, u)?, c.terminal(t, &xp)?);
        xp[i] = x[i];
        fd_x[i] = (rp - rm) / (2.0 * FD_STEP);
        fd_term[i] = (tp - tm) / (2.0 * FD_STEP);
    }
    for i in 0..u.len() {
        up[i] = u[i] + FD_STEP;
        let rp = c.running(t, x, &up)?;
        up[i] = u[i] - FD_STEP;
        let rm = c.running(t, x, &up)?;
        up[i] = u[i];
        fd_u[i] = (rp - rm) / (2.0 * FD_STEP);
    }
    let running = rel((&lx - &fd_x).amax().max((&lu - &fd_u).amax()), fd_x.amax().max(fd_u.amax()));
    let terminal = rel((&lx_term - &fd_term).amax(), fd_term.amax());
    Ok(running.max(terminal))
}
