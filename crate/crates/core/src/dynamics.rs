//! Discrete-time robot models.
//!
//! Three models share one interface: a unit-mass double integrator, a
//! damped pendulum, and a planar 2- or 3-link arm with point masses. All
//! of them advance with semi-implicit Euler:
//!
//! ```text
//! qd' = qd + dt * qdd(q, qd, u)
//! q'  = q  + dt * qd'
//! ```
//!
//! Arm inverse dynamics is a planar recursive Newton-Euler pass. The mass
//! matrix is assembled column by column from unit accelerations and the
//! forward dynamics solve uses a dense Cholesky factorization (n <= 3).

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, invalid, Error, Result};

pub type StateVec = DVector<f64>;
pub type ControlVec = DVector<f64>;

/// Largest supported arm.
pub const MAX_LINKS: usize = 3;

/// Central-difference perturbation used for every finite-difference derivative.
pub const FD_STEP: f64 = 1e-6;

pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_DAMPING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DoubleIntegrator,
    Pendulum,
    PlanarArm,
}

/// Serialized model description, validated into a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_links: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_lengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_masses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub com_ratios: Vec<f64>,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "default_damping")]
    pub viscous_damping: f64,
}

fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

/// A validated, immutable robot model.
///
/// For the pendulum the joint angle is measured from the downward vertical.
/// For the arm, `q = 0` stretches the chain along +x and gravity acts along -y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParams", into = "ModelParams")]
pub struct ModelSpec {
    kind: ModelKind,
    links: usize,
    lengths: [f64; MAX_LINKS],
    masses: [f64; MAX_LINKS],
    com: [f64; MAX_LINKS],
    gravity: f64,
    damping: f64,
}

/// `A = d(step)/dx`, `B = d(step)/du`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsJacobians {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Next state together with the Jacobians at the expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub next: StateVec,
    pub jac: DynamicsJacobians,
}

impl TryFrom<ModelParams> for ModelSpec {
    type Error = Error;

    fn try_from(p: ModelParams) -> Result<Self> {
        ModelSpec::from_params(&p)
    }
}

impl From<ModelSpec> for ModelParams {
    fn from(m: ModelSpec) -> Self {
        let links = m.links;
        let arm = m.kind == ModelKind::PlanarArm;
        let slice = |a: &[f64; MAX_LINKS]| {
            if m.kind == ModelKind::DoubleIntegrator {
                Vec::new()
            } else {
                a[..links].to_vec()
            }
        };
        ModelParams {
            kind: m.kind,
            n_links: arm.then_some(links),
            link_lengths: slice(&m.lengths),
            link_masses: slice(&m.masses),
            com_ratios: slice(&m.com),
            gravity: m.gravity,
            viscous_damping: m.damping,
        }
    }
}

impl ModelSpec {
    pub fn double_integrator() -> Self {
        ModelSpec {
            kind: ModelKind::DoubleIntegrator,
            links: 1,
            lengths: [0.0; MAX_LINKS],
            masses: [0.0; MAX_LINKS],
            com: [0.0; MAX_LINKS],
            gravity: 0.0,
            damping: 0.0,
        }
    }

    pub fn pendulum(mass: f64, length: f64, com_ratio: f64, damping: f64) -> Result<Self> {
        Self::from_params(&ModelParams {
            kind: ModelKind::Pendulum,
            n_links: None,
            link_lengths: vec![length],
            link_masses: vec![mass],
            com_ratios: vec![com_ratio],
            gravity: DEFAULT_GRAVITY,
            viscous_damping: damping,
        })
    }

    pub fn planar_arm(lengths: &[f64], masses: &[f64], com_ratios: &[f64], damping: f64) -> Result<Self> {
        Self::from_params(&ModelParams {
            kind: ModelKind::PlanarArm,
            n_links: Some(lengths.len()),
            link_lengths: lengths.to_vec(),
            link_masses: masses.to_vec(),
            com_ratios: com_ratios.to_vec(),
            gravity: DEFAULT_GRAVITY,
            viscous_damping: damping,
        })
    }

    pub fn with_gravity(mut self, gravity: f64) -> Result<Self> {
        if !gravity.is_finite() {
            return Err(invalid("gravity must be finite"));
        }
        if self.kind != ModelKind::DoubleIntegrator {
            self.gravity = gravity;
        }
        Ok(self)
    }

    /// Validates serialized parameters. Empty `com_ratios` default to 0.5 per
    /// arm link and 1.0 for the pendulum.
    pub fn from_params(p: &ModelParams) -> Result<Self> {
        if p.kind == ModelKind::DoubleIntegrator {
            return Ok(Self::double_integrator());
        }
        let links = match p.kind {
            ModelKind::Pendulum => {
                if p.n_links.is_some_and(|n| n != 1) {
                    return Err(invalid("pendulum has exactly one link"));
                }
                1
            }
            _ => {
                let n = p.n_links.unwrap_or(p.link_lengths.len());
                if !(2..=MAX_LINKS).contains(&n) {
                    return Err(invalid(format!("planar_arm n_links must be 2 or 3, got {n}")));
                }
                n
            }
        };
        check_len("link_lengths", p.link_lengths.len(), links)?;
        check_len("link_masses", p.link_masses.len(), links)?;
        let default_com = if p.kind == ModelKind::Pendulum { 1.0 } else { 0.5 };
        let com = if p.com_ratios.is_empty() { vec![default_com; links] } else { p.com_ratios.clone() };
        check_len("com_ratios", com.len(), links)?;

        let mut spec = ModelSpec {
            kind: p.kind,
            links,
            lengths: [0.0; MAX_LINKS],
            masses: [0.0; MAX_LINKS],
            com: [0.0; MAX_LINKS],
            gravity: p.gravity,
            damping: p.viscous_damping,
        };
        for i in 0..links {
            let (l, m, c) = (p.link_lengths[i], p.link_masses[i], com[i]);
            if !(l.is_finite() && l > 0.0) {
                return Err(invalid(format!("link_lengths[{i}] must be positive")));
            }
            if !(m.is_finite() && m > 0.0) {
                return Err(invalid(format!("link_masses[{i}] must be positive")));
            }
            if !(c.is_finite() && c > 0.0 && c <= 1.0) {
                return Err(invalid(format!("com_ratios[{i}] must lie in (0, 1]")));
            }
            spec.lengths[i] = l;
            spec.masses[i] = m;
            spec.com[i] = c;
        }
        if !p.gravity.is_finite() {
            return Err(invalid("gravity must be finite"));
        }
        if !(p.viscous_damping.is_finite() && p.viscous_damping >= 0.0) {
            return Err(invalid("viscous_damping must be nonnegative"));
        }
        Ok(spec)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Number of joints (1 for the double integrator and the pendulum).
    pub fn dof(&self) -> usize {
        self.links
    }

    pub fn nx(&self) -> usize {
        2 * self.links
    }

    pub fn nu(&self) -> usize {
        self.links
    }

    pub fn link_lengths(&self) -> &[f64] {
        if self.kind == ModelKind::DoubleIntegrator {
            &[]
        } else {
            &self.lengths[..self.links]
        }
    }

    pub fn link_masses(&self) -> &[f64] {
        if self.kind == ModelKind::DoubleIntegrator {
            &[]
        } else {
            &self.masses[..self.links]
        }
    }

    pub fn com_ratios(&self) -> &[f64] {
        if self.kind == ModelKind::DoubleIntegrator {
            &[]
        } else {
            &self.com[..self.links]
        }
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn viscous_damping(&self) -> f64 {
        self.damping
    }

    pub fn has_end_effector(&self) -> bool {
        self.kind == ModelKind::PlanarArm
    }

    fn check_state_control(&self, x: &[f64], u: &[f64], dt: f64) -> Result<()> {
        check_len("state", x.len(), self.nx())?;
        check_len("control", u.len(), self.nu())?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        check_finite("state", x)?;
        check_finite("control", u)
    }

    fn check_articulated(&self) -> Result<()> {
        if self.kind == ModelKind::DoubleIntegrator {
            return Err(invalid("operation requires a pendulum or planar_arm model"));
        }
        Ok(())
    }

    fn check_arm(&self) -> Result<()> {
        if self.kind != ModelKind::PlanarArm {
            return Err(invalid("operation requires a planar_arm model"));
        }
        Ok(())
    }

    /// Advances one semi-implicit Euler step.
    pub fn step(&self, x: &StateVec, u: &ControlVec, dt: f64) -> Result<StateVec> {
        self.check_state_control(x.as_slice(), u.as_slice(), dt)?;
        let mut out = StateVec::zeros(self.nx());
        self.step_into(x.as_slice(), u.as_slice(), dt, out.as_mut_slice())?;
        Ok(out)
    }

    /// Unchecked step on raw slices; the hot path of every rollout.
    pub(crate) fn step_into(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
        let n = self.links;
        let (q, qd) = x.split_at(n);
        let qdd = self.forward_dynamics(q, qd, u)?.qdd;
        integrate(n, q, qd, &qdd, dt, out);
        Ok(())
    }

    /// Joint accelerations solving `M(q) qdd = tau - h(q, qd)`.
    pub fn accel(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Result<DVector<f64>> {
        self.check_articulated()?;
        self.check_joint_args(q, qd, tau)?;
        let fd = self.forward_dynamics(q, qd, tau)?;
        Ok(DVector::from_column_slice(&fd.qdd[..self.links]))
    }

    /// Joint torques producing `qdd` at `(q, qd)`, gravity and damping included.
    pub fn inverse_dynamics(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> Result<DVector<f64>> {
        self.check_articulated()?;
        self.check_joint_args(q, qd, qdd)?;
        let mut tau = [0.0; MAX_LINKS];
        self.rnea(q, qd, qdd, true, &mut tau);
        Ok(DVector::from_column_slice(&tau[..self.links]))
    }

    pub fn mass_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_articulated()?;
        check_len("q", q.len(), self.links)?;
        check_finite("q", q)?;
        let m = self.mass_matrix_small(q);
        Ok(DMatrix::from_fn(self.links, self.links, |i, j| m.a[i][j]))
    }

    fn check_joint_args(&self, q: &[f64], qd: &[f64], third: &[f64]) -> Result<()> {
        let n = self.links;
        check_len("q", q.len(), n)?;
        check_len("qd", qd.len(), n)?;
        check_len("joint vector", third.len(), n)?;
        check_finite("q", q)?;
        check_finite("qd", qd)?;
        check_finite("joint vector", third)
    }

    /// Planar recursive Newton-Euler with point masses at the link COMs.
    /// `full` toggles gravity and viscous damping (off for mass-matrix columns).
    fn rnea(&self, q: &[f64], qd: &[f64], qdd: &[f64], full: bool, tau: &mut [f64; MAX_LINKS]) {
        if self.kind == ModelKind::Pendulum {
            let (g, b) = if full { (self.gravity, self.damping) } else { (0.0, 0.0) };
            let rc = self.com[0] * self.lengths[0];
            let m = self.masses[0];
            tau[0] = m * rc * rc * qdd[0] + m * g * rc * q[0].sin() + b * qd[0];
            return;
        }
        self.rnea_arm(&self.link_dirs(q), qd, qdd, full, tau);
    }

    /// Absolute link directions `(cos, sin)` for the arm.
    fn link_dirs(&self, q: &[f64]) -> [[f64; 2]; MAX_LINKS] {
        let mut dir = [[0.0; 2]; MAX_LINKS];
        let mut th = 0.0;
        for i in 0..self.links {
            th += q[i];
            let (s, c) = th.sin_cos();
            dir[i] = [c, s];
        }
        dir
    }

    fn rnea_arm(&self, dir: &[[f64; 2]; MAX_LINKS], qd: &[f64], qdd: &[f64], full: bool, tau: &mut [f64; MAX_LINKS]) {
        let g = if full { self.gravity } else { 0.0 };
        let b = if full { self.damping } else { 0.0 };
        let n = self.links;
        let (mut w, mut al) = (0.0, 0.0);
        let mut acc_joint = [0.0f64; 2];
        let mut acc_com = [[0.0f64; 2]; MAX_LINKS];
        for i in 0..n {
            w += qd[i];
            al += qdd[i];
            let [c, s] = dir[i];
            // acceleration of a point at unit distance along the link, relative to its joint
            let rel = [-al * s - w * w * c, al * c - w * w * s];
            let rc = self.com[i] * self.lengths[i];
            let l = self.lengths[i];
            acc_com[i] = [acc_joint[0] + rc * rel[0], acc_joint[1] + rc * rel[1]];
            acc_joint = [acc_joint[0] + l * rel[0], acc_joint[1] + l * rel[1]];
        }
        let mut f_child = [0.0f64; 2];
        let mut t_child = 0.0;
        for i in (0..n).rev() {
            let m = self.masses[i];
            let f_com = [m * acc_com[i][0], m * (acc_com[i][1] + g)];
            let rc = self.com[i] * self.lengths[i];
            let l = self.lengths[i];
            let [c, s] = dir[i];
            let moment = rc * (c * f_com[1] - s * f_com[0]) + l * (c * f_child[1] - s * f_child[0]) + t_child;
            f_child = [f_com[0] + f_child[0], f_com[1] + f_child[1]];
            t_child = moment;
            tau[i] = moment + b * qd[i];
        }
    }

    /// Forward-mode derivative of the full arm RNEA at fixed `qdd`:
    /// returns `(dtau/dq, dtau/dqd)`. Tangent slot `k < n` seeds `q_k`,
    /// slot `n + k` seeds `qd_k`.
    fn rnea_arm_partials(&self, dir: &[[f64; 2]; MAX_LINKS], qd: &[f64], qdd: &[f64]) -> (SmallMat, SmallMat) {
        const K: usize = 2 * MAX_LINKS;
        type Tan = [f64; K];
        let n = self.links;
        let g = self.gravity;
        let (mut w, mut al) = (0.0, 0.0);
        let (mut dth, mut dw): (Tan, Tan) = ([0.0; K], [0.0; K]);
        let mut acc_joint = [0.0f64; 2];
        let mut dacc_joint: [Tan; 2] = [[0.0; K]; 2];
        let mut acc_com = [[0.0f64; 2]; MAX_LINKS];
        let mut dacc_com: [[Tan; 2]; MAX_LINKS] = [[[0.0; K]; 2]; MAX_LINKS];
        let mut ds: [Tan; MAX_LINKS] = [[0.0; K]; MAX_LINKS];
        let mut dc: [Tan; MAX_LINKS] = [[0.0; K]; MAX_LINKS];
        for i in 0..n {
            w += qd[i];
            al += qdd[i];
            dth[i] = 1.0;
            dw[n + i] = 1.0;
            let [c, s] = dir[i];
            let rel = [-al * s - w * w * c, al * c - w * w * s];
            let rc = self.com[i] * self.lengths[i];
            let l = self.lengths[i];
            for k in 0..2 * n {
                ds[i][k] = c * dth[k];
                dc[i][k] = -s * dth[k];
                let d_w2 = 2.0 * w * dw[k];
                let drel = [-al * ds[i][k] - d_w2 * c - w * w * dc[i][k], al * dc[i][k] - d_w2 * s - w * w * ds[i][k]];
                for a in 0..2 {
                    dacc_com[i][a][k] = dacc_joint[a][k] + rc * drel[a];
                    dacc_joint[a][k] += l * drel[a];
                }
            }
            acc_com[i] = [acc_joint[0] + rc * rel[0], acc_joint[1] + rc * rel[1]];
            acc_joint = [acc_joint[0] + l * rel[0], acc_joint[1] + l * rel[1]];
        }
        let mut f_child = [0.0f64; 2];
        let mut df_child: [Tan; 2] = [[0.0; K]; 2];
        let mut dt_child: Tan = [0.0; K];
        let mut dq = SmallMat::zeros(n);
        let mut dqd = SmallMat::zeros(n);
        for i in (0..n).rev() {
            let m = self.masses[i];
            let f_com = [m * acc_com[i][0], m * (acc_com[i][1] + g)];
            let rc = self.com[i] * self.lengths[i];
            let l = self.lengths[i];
            let [c, s] = dir[i];
            for k in 0..2 * n {
                let df_com = [m * dacc_com[i][0][k], m * dacc_com[i][1][k]];
                let dmoment = rc * (dc[i][k] * f_com[1] + c * df_com[1] - ds[i][k] * f_com[0] - s * df_com[0])
                    + l * (dc[i][k] * f_child[1] + c * df_child[1][k] - ds[i][k] * f_child[0] - s * df_child[0][k])
                    + dt_child[k];
                df_child[0][k] += df_com[0];
                df_child[1][k] += df_com[1];
                dt_child[k] = dmoment;
                if k < n {
                    dq.a[i][k] = dmoment;
                } else {
                    dqd.a[i][k - n] = dmoment;
                }
            }
            dqd.a[i][i] += self.damping;
            f_child = [f_com[0] + f_child[0], f_com[1] + f_child[1]];
        }
        (dq, dqd)
    }

    fn mass_matrix_small(&self, q: &[f64]) -> SmallMat {
        if self.kind == ModelKind::PlanarArm {
            return self.arm_mass_matrix(&self.link_dirs(q));
        }
        let n = self.links;
        let zero = [0.0; MAX_LINKS];
        let mut m = SmallMat::zeros(n);
        let mut col = [0.0; MAX_LINKS];
        for j in 0..n {
            let mut e = [0.0; MAX_LINKS];
            e[j] = 1.0;
            self.rnea(q, &zero[..n], &e[..n], false, &mut col);
            for i in 0..n {
                m.a[i][j] = col[i];
            }
        }
        m
    }

    /// Mass matrix by unit-acceleration RNEA passes at zero velocity.
    fn arm_mass_matrix(&self, dir: &[[f64; 2]; MAX_LINKS]) -> SmallMat {
        let n = self.links;
        let zero = [0.0; MAX_LINKS];
        let mut m = SmallMat::zeros(n);
        let mut col = [0.0; MAX_LINKS];
        for j in 0..n {
            let mut e = [0.0; MAX_LINKS];
            e[j] = 1.0;
            self.rnea_arm(dir, &zero[..n], &e[..n], false, &mut col);
            m.set_col(j, &col);
        }
        m
    }

    fn forward_dynamics(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Result<ForwardDynamics> {
        let n = self.links;
        let zero = [0.0; MAX_LINKS];
        let mut bias = [0.0; MAX_LINKS];
        let mut dir = [[0.0; 2]; MAX_LINKS];
        let chol = match self.kind {
            ModelKind::DoubleIntegrator => {
                let mut qdd = [0.0; MAX_LINKS];
                qdd[0] = tau[0];
                return Ok(ForwardDynamics { chol: None, qdd, dir });
            }
            ModelKind::Pendulum => {
                self.rnea(q, qd, &zero[..n], true, &mut bias);
                self.mass_matrix_small(q).cholesky()?
            }
            ModelKind::PlanarArm => {
                dir = self.link_dirs(q);
                self.rnea_arm(&dir, qd, &zero[..n], true, &mut bias);
                self.arm_mass_matrix(&dir).cholesky()?
            }
        };
        let mut qdd = [0.0; MAX_LINKS];
        for i in 0..n {
            qdd[i] = tau[i] - bias[i];
        }
        chol.solve(&mut qdd);
        Ok(ForwardDynamics { chol: Some(chol), qdd, dir })
    }

    /// Exact-to-tolerance Jacobians of [`ModelSpec::step`].
    pub fn jacobians(&self, x: &StateVec, u: &ControlVec, dt: f64) -> Result<DynamicsJacobians> {
        Ok(self.linearize(x, u, dt)?.jac)
    }

    /// Next state and Jacobians in one pass.
    ///
    /// Double integrator and pendulum use closed forms. For the arm the
    /// acceleration sensitivities come from `d(qdd) = -M^-1 d(ID)|_qdd` and
    /// `d(qdd)/du = M^-1`, with the inverse-dynamics partials from a
    /// forward-mode pass through the recursion; the semi-implicit Euler chain
    /// rule is then exact.
    pub fn linearize(&self, x: &StateVec, u: &ControlVec, dt: f64) -> Result<Linearization> {
        self.check_state_control(x.as_slice(), u.as_slice(), dt)?;
        crate::instrument::jacobian();
        let n = self.links;
        let (q, qd) = x.as_slice().split_at(n);
        let u = u.as_slice();
        let fd = self.forward_dynamics(q, qd, u)?;
        let mut next = StateVec::zeros(self.nx());
        integrate(n, q, qd, &fd.qdd, dt, next.as_mut_slice());

        let mut dq = SmallMat::zeros(n);
        let mut dqd = SmallMat::zeros(n);
        let mut minv = SmallMat::zeros(n);
        match self.kind {
            ModelKind::DoubleIntegrator => minv.a[0][0] = 1.0,
            ModelKind::Pendulum => {
                let rc = self.com[0] * self.lengths[0];
                let m = self.masses[0];
                let inertia = m * rc * rc;
                dq.a[0][0] = -m * self.gravity * rc * q[0].cos() / inertia;
                dqd.a[0][0] = -self.damping / inertia;
                minv.a[0][0] = 1.0 / inertia;
            }
            ModelKind::PlanarArm => {
                let chol = fd.chol.as_ref().expect("arm forward dynamics factorizes M");
                let (did_q, did_qd) = self.rnea_arm_partials(&fd.dir, qd, &fd.qdd[..n]);
                for j in 0..n {
                    let mut cq = [0.0; MAX_LINKS];
                    let mut cqd = [0.0; MAX_LINKS];
                    let mut e = [0.0; MAX_LINKS];
                    for i in 0..n {
                        cq[i] = -did_q.a[i][j];
                        cqd[i] = -did_qd.a[i][j];
                    }
                    e[j] = 1.0;
                    chol.solve(&mut cq);
                    chol.solve(&mut cqd);
                    chol.solve(&mut e);
                    dq.set_col(j, &cq);
                    dqd.set_col(j, &cqd);
                    minv.set_col(j, &e);
                }
            }
        }
        let jac = assemble_step_jacobians(n, dt, &dq, &dqd, &minv);
        Ok(Linearization { next, jac })
    }

    /// Jacobians of `step` by central differences on the full step map.
    /// Slow; kept as a reference for cross-checks.
    pub fn fd_jacobians(&self, x: &StateVec, u: &ControlVec, dt: f64, h: f64) -> Result<DynamicsJacobians> {
        self.check_state_control(x.as_slice(), u.as_slice(), dt)?;
        let (nx, nu) = (self.nx(), self.nu());
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        let mut xp = x.clone();
        for j in 0..nx {
            xp[j] = x[j] + h;
            let fp = self.step(&xp, u, dt)?;
            xp[j] = x[j] - h;
            let fm = self.step(&xp, u, dt)?;
            xp[j] = x[j];
            a.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let mut up = u.clone();
        for j in 0..nu {
            up[j] = u[j] + h;
            let fp = self.step(x, &up, dt)?;
            up[j] = u[j] - h;
            let fm = self.step(x, &up, dt)?;
            up[j] = u[j];
            b.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        Ok(DynamicsJacobians { a, b })
    }

    /// End-effector position of the arm tip in meters.
    pub fn ee_position(&self, q: &[f64]) -> Result<Vector2<f64>> {
        self.check_arm()?;
        check_len("q", q.len(), self.links)?;
        Ok(self.ee_position_unchecked(q))
    }

    pub(crate) fn ee_position_unchecked(&self, q: &[f64]) -> Vector2<f64> {
        let mut th = 0.0;
        let mut p = Vector2::zeros();
        for i in 0..self.links {
            th += q[i];
            p += self.lengths[i] * Vector2::new(th.cos(), th.sin());
        }
        p
    }

    /// Analytic 2 x n Jacobian of [`ModelSpec::ee_position`].
    pub fn ee_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_arm()?;
        check_len("q", q.len(), self.links)?;
        Ok(self.ee_jacobian_unchecked(q))
    }

    pub(crate) fn ee_jacobian_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.links;
        let mut jac = DMatrix::zeros(2, n);
        let mut th = 0.0;
        let mut tips = [[0.0f64; 2]; MAX_LINKS];
        for i in 0..n {
            th += q[i];
            tips[i] = [-self.lengths[i] * th.sin(), self.lengths[i] * th.cos()];
        }
        // column j sums the contributions of links j..n
        let mut acc = [0.0f64; 2];
        for j in (0..n).rev() {
            acc[0] += tips[j][0];
            acc[1] += tips[j][1];
            jac[(0, j)] = acc[0];
            jac[(1, j)] = acc[1];
        }
        jac
    }
}

fn integrate(n: usize, q: &[f64], qd: &[f64], qdd: &[f64; MAX_LINKS], dt: f64, out: &mut [f64]) {
    for i in 0..n {
        let v = qd[i] + dt * qdd[i];
        out[n + i] = v;
        out[i] = q[i] + dt * v;
    }
}

fn assemble_step_jacobians(n: usize, dt: f64, dq: &SmallMat, dqd: &SmallMat, minv: &SmallMat) -> DynamicsJacobians {
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            let v_q = dt * dq.a[i][j];
            let v_qd = eye + dt * dqd.a[i][j];
            let v_u = dt * minv.a[i][j];
            a[(n + i, j)] = v_q;
            a[(n + i, n + j)] = v_qd;
            a[(i, j)] = eye + dt * v_q;
            a[(i, n + j)] = dt * v_qd;
            b[(n + i, j)] = v_u;
            b[(i, j)] = dt * v_u;
        }
    }
    DynamicsJacobians { a, b }
}

struct ForwardDynamics {
    chol: Option<SmallMat>,
    qdd: [f64; MAX_LINKS],
    /// Link directions, filled for the arm only.
    dir: [[f64; 2]; MAX_LINKS],
}

/// Stack-allocated dense matrix for the n <= 3 joint-space algebra.
#[derive(Debug, Clone, Copy)]
struct SmallMat {
    n: usize,
    a: [[f64; MAX_LINKS]; MAX_LINKS],
}

impl SmallMat {
    fn zeros(n: usize) -> Self {
        SmallMat { n, a: [[0.0; MAX_LINKS]; MAX_LINKS] }
    }

    fn set_col(&mut self, j: usize, col: &[f64; MAX_LINKS]) {
        for i in 0..self.n {
            self.a[i][j] = col[i];
        }
    }

    /// In-place lower Cholesky factor.
    fn cholesky(mut self) -> Result<SmallMat> {
        let n = self.n;
        for j in 0..n {
            let mut d = self.a[j][j];
            for k in 0..j {
                d -= self.a[j][k] * self.a[j][k];
            }
            if d.is_nan() || d <= 0.0 {
                return Err(Error::Numerical("mass matrix is not positive definite".into()));
            }
            let d = d.sqrt();
            self.a[j][j] = d;
            for i in (j + 1)..n {
                let mut s = self.a[i][j];
                for k in 0..j {
                    s -= self.a[i][k] * self.a[j][k];
                }
                self.a[i][j] = s / d;
            }
        }
        Ok(self)
    }

    /// Solves `L L^T x = b` in place, `self` holding `L`.
    fn solve(&self, b: &mut [f64; MAX_LINKS]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.a[i][k] * b[k];
            }
            b[i] = s / self.a[i][i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.a[k][i] * b[k];
            }
            b[i] = s / self.a[i][i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn arm2() -> ModelSpec {
        ModelSpec::planar_arm(&[1.0, 1.0], &[1.0, 1.0], &[0.5, 0.5], 0.1).unwrap()
    }

    fn arm3() -> ModelSpec {
        ModelSpec::planar_arm(&[0.4, 0.35, 0.25], &[2.0, 1.5, 0.8], &[0.5, 0.5, 0.6], 0.1).unwrap()
    }

    fn pendulum() -> ModelSpec {
        ModelSpec::pendulum(1.2, 0.8, 0.7, 0.05).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn double_integrator_steps() {
        let m = ModelSpec::double_integrator();
        let x = m.step(&v(&[0.0, 0.0]), &v(&[2.0]), 0.1).unwrap();
        assert!((x[0] - 0.02).abs() < 1e-15 && (x[1] - 0.2).abs() < 1e-15);
        let x = m.step(&v(&[0.0, 1.0]), &v(&[0.0]), 0.1).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    /// Independent statics: with everything at rest and horizontal, the torque
    /// that holds each joint is the summed moment of the downstream weights.
    fn static_holding_torques(lengths: &[f64], masses: &[f64], com: &[f64], g: f64) -> Vec<f64> {
        let n = lengths.len();
        let mut joint_x = vec![0.0; n];
        for i in 1..n {
            joint_x[i] = joint_x[i - 1] + lengths[i - 1];
        }
        (0..n).map(|j| (j..n).map(|k| masses[k] * g * (joint_x[k] + com[k] * lengths[k] - joint_x[j])).sum()).collect()
    }

    /// Textbook closed-form Lagrangian dynamics of a two-link point-mass arm.
    fn two_link_lagrangian_qdd(q: [f64; 2], tau: [f64; 2], l: [f64; 2], m: [f64; 2], c: [f64; 2], g: f64) -> [f64; 2] {
        let (lc1, lc2) = (c[0] * l[0], c[1] * l[1]);
        let c2 = q[1].cos();
        let m11 = m[0] * lc1 * lc1 + m[1] * (l[0] * l[0] + lc2 * lc2 + 2.0 * l[0] * lc2 * c2);
        let m12 = m[1] * (lc2 * lc2 + l[0] * lc2 * c2);
        let m22 = m[1] * lc2 * lc2;
        let g1 = (m[0] * lc1 + m[1] * l[0]) * g * q[0].cos() + m[1] * lc2 * g * (q[0] + q[1]).cos();
        let g2 = m[1] * lc2 * g * (q[0] + q[1]).cos();
        let (r1, r2) = (tau[0] - g1, tau[1] - g2);
        let det = m11 * m22 - m12 * m12;
        [(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det]
    }

    #[test]
    fn arm_falls_from_horizontal() {
        let m = arm2();
        let id = m.inverse_dynamics(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let oracle = static_holding_torques(&[1.0, 1.0], &[1.0, 1.0], &[0.5, 0.5], 9.81);
        for i in 0..2 {
            assert!((id[i] - oracle[i]).abs() < 1e-12, "{id} vs {oracle:?}");
        }
        let dt = 0.01;
        let x = m.step(&v(&[0.0, 0.0, 0.0, 0.0]), &v(&[0.0, 0.0]), dt).unwrap();
        let qdd = two_link_lagrangian_qdd([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [0.5, 0.5], 9.81);
        // shoulder drops; with point masses the elbow flexes upward relative to link 1
        assert!(x[2] < 0.0, "{x}");
        assert!((x[2] - dt * qdd[0]).abs() < 1e-12 && (x[3] - dt * qdd[1]).abs() < 1e-12, "{x} vs {qdd:?}");
    }

    #[test]
    fn arm_accel_matches_lagrangian_oracle() {
        let m = ModelSpec::planar_arm(&[0.7, 0.5], &[1.3, 0.6], &[0.4, 0.8], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let q = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
            let tau = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let qdd = m.accel(&q, &[0.0, 0.0], &tau).unwrap();
            let oracle = two_link_lagrangian_qdd(q, tau, [0.7, 0.5], [1.3, 0.6], [0.4, 0.8], 9.81);
            assert!((qdd[0] - oracle[0]).abs() < 1e-10 && (qdd[1] - oracle[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn gravity_torque_gives_zero_accel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [pendulum(), arm2(), arm3()] {
            let n = m.dof();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
            let zero = vec![0.0; n];
            let tau = m.inverse_dynamics(&q, &zero, &zero).unwrap();
            let qdd = m.accel(&q, &zero, tau.as_slice()).unwrap();
            assert!(qdd.amax() < 1e-10, "{qdd}");
        }
    }

    #[test]
    fn pendulum_horizontal_accel() {
        let m = ModelSpec::pendulum(1.0, 1.0, 1.0, 0.0).unwrap();
        let qdd = m.accel(&[FRAC_PI_2], &[0.0], &[0.0]).unwrap();
        assert!((qdd[0] + 9.81).abs() < 1e-12);
    }

    #[test]
    fn mass_matrix_matches_fd_of_inverse_dynamics() {
        let m = arm2();
        let q = [0.3, -1.1];
        let qd = [0.4, 0.2];
        let mm = m.mass_matrix(&q).unwrap();
        for j in 0..2 {
            let mut ap = [0.0, 0.0];
            let mut am = [0.0, 0.0];
            ap[j] = FD_STEP;
            am[j] = -FD_STEP;
            let col = (m.inverse_dynamics(&q, &qd, &ap).unwrap() - m.inverse_dynamics(&q, &qd, &am).unwrap())
                / (2.0 * FD_STEP);
            for i in 0..2 {
                assert!((col[i] - mm[(i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn inverse_dynamics_partials_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for m in [arm2(), arm3()] {
            let n = m.dof();
            for _ in 0..50 {
                let q: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
                let qd: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let qdd: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
                let (did_q, did_qd) = m.rnea_arm_partials(&m.link_dirs(&q), &qd, &qdd);
                for j in 0..n {
                    for (which, exact) in [(0, &did_q), (1, &did_qd)] {
                        let base = if which == 0 { &q } else { &qd };
                        let (mut p, mut mi) = (base.clone(), base.clone());
                        p[j] += FD_STEP;
                        mi[j] -= FD_STEP;
                        let (tp, tm) = if which == 0 {
                            (m.inverse_dynamics(&p, &qd, &qdd).unwrap(), m.inverse_dynamics(&mi, &qd, &qdd).unwrap())
                        } else {
                            (m.inverse_dynamics(&q, &p, &qdd).unwrap(), m.inverse_dynamics(&q, &mi, &qdd).unwrap())
                        };
                        for i in 0..n {
                            let fd = (tp[i] - tm[i]) / (2.0 * FD_STEP);
                            assert!(
                                (fd - exact.a[i][j]).abs() <= 1e-6 * fd.abs().max(1.0),
                                "{fd} vs {}",
                                exact.a[i][j]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in [arm2(), arm3()] {
            for _ in 0..100 {
                let q: Vec<f64> = (0..m.dof()).map(|_| rng.random_range(-PI..PI)).collect();
                let mm = m.mass_matrix(&q).unwrap();
                assert!(max_abs(&(&mm - mm.transpose())) <= 1e-10);
                let eig = mm.clone().symmetric_eigen().eigenvalues;
                assert!(eig.min() > 0.0);
            }
        }
    }

    #[test]
    fn double_integrator_jacobians_closed_form() {
        let m = ModelSpec::double_integrator();
        let j = m.jacobians(&v(&[3.0, -1.0]), &v(&[0.7]), 0.1).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.01, 0.1]);
        assert!(max_abs(&(j.a - a)) < 1e-15);
        assert!(max_abs(&(j.b - b)) < 1e-15);
    }

    #[test]
    fn pendulum_jacobians_match_fd() {
        let m = pendulum();
        let x = v(&[0.7, -0.3]);
        let u = v(&[0.4]);
        let j = m.jacobians(&x, &u, 0.01).unwrap();
        let f = m.fd_jacobians(&x, &u, 0.01, FD_STEP).unwrap();
        assert!(max_abs(&(j.a - f.a)) <= 1e-6);
        assert!(max_abs(&(j.b - f.b)) <= 1e-6);
    }

    #[test]
    fn jacobians_consistent_with_fd_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [ModelSpec::double_integrator(), pendulum(), arm2(), arm3()] {
            for _ in 0..100 {
                let x = DVector::from_fn(m.nx(), |_, _| rng.random_range(-2.0..2.0));
                let u = DVector::from_fn(m.nu(), |_, _| rng.random_range(-5.0..5.0));
                let j = m.jacobians(&x, &u, 0.01).unwrap();
                let f = m.fd_jacobians(&x, &u, 0.01, FD_STEP).unwrap();
                assert!(max_abs(&(&j.a - &f.a)) <= 1e-5, "{:?}", m.kind());
                assert!(max_abs(&(&j.b - &f.b)) <= 1e-5, "{:?}", m.kind());
            }
        }
    }

    #[test]
    fn arm_jacobian_taylor_remainder_is_quadratic() {
        let m = arm3();
        let x = v(&[0.2, -0.5, 0.9, 0.3, -0.2, 0.4]);
        let u = v(&[1.0, -0.5, 0.2]);
        let dir = v(&[0.3, -0.7, 0.2, 0.5, 0.1, -0.4]);
        let dt = 0.01;
        let j = m.jacobians(&x, &u, dt).unwrap();
        let f0 = m.step(&x, &u, dt).unwrap();
        let remainder = |h: f64| {
            let fh = m.step(&(&x + h * &dir), &u, dt).unwrap();
            (fh - &f0 - h * (&j.a * &dir)).norm()
        };
        let mut prev = remainder(1e-2);
        for k in 1..4 {
            let h = 1e-2 / 2f64.powi(k);
            let r = remainder(h);
            let ratio = prev / r;
            assert!((3.0..5.0).contains(&ratio), "ratio {ratio} at h={h}");
            prev = r;
        }
    }

    #[test]
    fn ee_position_examples() {
        let m = arm2();
        let p = m.ee_position(&[0.0, 0.0]).unwrap();
        assert!((p - Vector2::new(2.0, 0.0)).norm() < 1e-15);
        let p = m.ee_position(&[FRAC_PI_2, 0.0]).unwrap();
        assert!((p - Vector2::new(0.0, 2.0)).norm() < 1e-15);
        let p = m.ee_position(&[FRAC_PI_2, -FRAC_PI_2]).unwrap();
        assert!((p - Vector2::new(1.0, 1.0)).norm() < 1e-15);
        assert!(ModelSpec::double_integrator().ee_position(&[0.0]).is_err());
    }

    #[test]
    fn ee_jacobian_examples() {
        let m = arm2();
        let j = m.ee_jacobian(&[0.0, 0.0]).unwrap();
        assert!(max_abs(&(j - DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 1.0]))) < 1e-15);
        let j = m.ee_jacobian(&[FRAC_PI_2, 0.0]).unwrap();
        assert!(max_abs(&(j - DMatrix::from_row_slice(2, 2, &[-2.0, -1.0, 0.0, 0.0]))) < 1e-15);
        assert!(pendulum().ee_jacobian(&[0.0]).is_err());
    }

    #[test]
    fn ee_jacobian_matches_fd_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [arm2(), arm3()] {
            let reach: f64 = m.link_lengths().iter().sum();
            for _ in 0..50 {
                let q: Vec<f64> = (0..m.dof()).map(|_| rng.random_range(-PI..PI)).collect();
                let j = m.ee_jacobian(&q).unwrap();
                assert!(max_abs(&j) <= reach);
                for c in 0..m.dof() {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[c] += FD_STEP;
                    qm[c] -= FD_STEP;
                    let col = (m.ee_position(&qp).unwrap() - m.ee_position(&qm).unwrap()) / (2.0 * FD_STEP);
                    assert!((col[0] - j[(0, c)]).abs() <= 1e-7 && (col[1] - j[(1, c)]).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn pendulum_conserves_energy_without_damping() {
        let (mass, l, c) = (1.0, 1.0, 1.0);
        let m = ModelSpec::pendulum(mass, l, c, 0.0).unwrap();
        let energy = |x: &StateVec| {
            let rc = c * l;
            0.5 * mass * rc * rc * x[1] * x[1] - mass * 9.81 * rc * x[0].cos()
        };
        let mut x = v(&[1.0, 0.0]);
        let e0 = energy(&x);
        let u = v(&[0.0]);
        let mut worst: f64 = 0.0;
        for _ in 0..100_000 {
            x = m.step(&x, &u, 1e-4).unwrap();
            worst = worst.max(((energy(&x) - e0) / e0).abs());
        }
        assert!(worst < 0.01, "relative drift {worst}");
    }

    #[test]
    fn step_rejects_bad_input() {
        let m = arm2();
        assert!(m.step(&v(&[0.0; 3]), &v(&[0.0; 2]), 0.01).is_err());
        assert!(m.step(&v(&[0.0; 4]), &v(&[0.0; 2]), 0.0).is_err());
        assert!(m.step(&v(&[f64::NAN, 0.0, 0.0, 0.0]), &v(&[0.0; 2]), 0.01).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::planar_arm(&[1.0, -1.0], &[1.0, 1.0], &[0.5, 0.5], 0.1).is_err());
        assert!(ModelSpec::planar_arm(&[1.0; 4], &[1.0; 4], &[0.5; 4], 0.1).is_err());
        assert!(ModelSpec::pendulum(0.0, 1.0, 1.0, 0.1).is_err());
        assert!(ModelSpec::pendulum(1.0, 1.0, 1.5, 0.1).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let m = arm3();
        let x = v(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let u = v(&[0.3, 0.2, 0.1]);
        let a = m.step(&x, &u, 0.01).unwrap();
        let b = m.step(&x, &u, 0.01).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
