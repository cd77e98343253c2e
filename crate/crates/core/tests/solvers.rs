mod common;

use agdmpc::agd::{agd_solve, AdamState, AgdSettings};
use agdmpc::ddp::{ddp_solve, DdpSettings};
use agdmpc::mpc::{plant_step, run_mpc, MpcConfig, SolverKind, SolverSettings};
use agdmpc::ocp::OcpDef;
use nalgebra::{DMatrix, DVector};

/// Minimizer and optimal cost of the LQR task as one dense quadratic program
/// in the stacked controls.
fn dense_qp_optimum(ocp: &OcpDef) -> (DVector<f64>, f64) {
    let (t_len, dt) = (ocp.horizon, ocp.dt);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[dt * dt, dt]);
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&ocp.weights.q_diag));
    let r = ocp.weights.r_diag[0];
    let s = ocp.weights.terminal_scale;

    // x_k = Sx_k x0 + Su_k u for k = 0..=T.
    let mut sx = vec![DMatrix::identity(2, 2)];
    let mut su = vec![DMatrix::zeros(2, t_len)];
    for k in 0..t_len {
        let next_sx = &a * &sx[k];
        let mut next_su = &a * &su[k];
        next_su.column_mut(k).copy_from(&b.column(0));
        sx.push(next_sx);
        su.push(next_su);
    }
    let mut h = DMatrix::identity(t_len, t_len) * r;
    let mut g = DVector::zeros(t_len);
    let mut c = 0.0;
    for k in 0..=t_len {
        let w = if k == t_len { &q * s } else { q.clone() };
        let free = &sx[k] * &ocp.x0;
        h += su[k].transpose() * &w * &su[k];
        g += su[k].transpose() * &w * &free;
        c += 0.5 * free.dot(&(&w * &free));
    }
    let u = -h.clone().cholesky().unwrap().solve(&g);
    let j = 0.5 * u.dot(&(&h * &u)) + g.dot(&u) + c;
    (u, j)
}

#[test]
fn lqr_solutions_match_dense_qp() {
    let task = common::lqr();
    let (u_star, j_star) = dense_qp_optimum(&task.ocp);

    let ddp = ddp_solve(&task.ocp, &task.ocp.zero_controls(), &task.ddp).unwrap();
    let u_ddp = DVector::from_iterator(task.ocp.horizon, ddp.traj.us.iter().map(|u| u[0]));
    assert!((&u_ddp - &u_star).amax() <= 1e-8, "{}", (&u_ddp - &u_star).amax());
    assert!((ddp.final_cost - j_star).abs() <= 1e-10 * j_star);

    let zeros = AdamState::zeros(task.ocp.horizon, 1);
    let (agd, _) = agd_solve(&task.ocp, &task.ocp.zero_controls(), &zeros, &task.agd).unwrap();
    assert!((agd.final_cost - j_star).abs() <= 1e-6 * j_star, "{} vs {j_star}", agd.final_cost);
}

#[test]
fn agd_makes_progress_in_every_window_until_converged() {
    let task = common::lqr();
    let (_, j_star) = dense_qp_optimum(&task.ocp);
    let zeros = AdamState::zeros(task.ocp.horizon, 1);
    let settings = AgdSettings { max_iters: 3000, ..task.agd.clone() };
    let (res, _) = agd_solve(&task.ocp, &task.ocp.zero_controls(), &zeros, &settings).unwrap();
    let costs: Vec<f64> = res.per_iter_log.iter().map(|r| r.cost).collect();

    let mut best = f64::INFINITY;
    let best_so_far: Vec<f64> = costs
        .iter()
        .map(|&c| {
            best = best.min(c);
            best
        })
        .collect();
    assert!(best_so_far.windows(2).all(|w| w[1] <= w[0]));
    for start in 1..best_so_far.len().saturating_sub(100) {
        let before = best_so_far[start - 1];
        if before - j_star <= 1e-6 * j_star {
            break;
        }
        assert!(best_so_far[start + 99] < before, "no progress in window starting at {start}");
    }
}

#[test]
fn reach_task_solvers_agree() {
    let task = common::reach();
    let us0 = task.ocp.reference_controls();
    let ddp = ddp_solve(&task.ocp, &us0, &task.ddp).unwrap();
    let zeros = AdamState::zeros(task.ocp.horizon, task.ocp.nu());
    let (agd, _) = agd_solve(&task.ocp, &us0, &zeros, &task.agd).unwrap();
    let rel = (agd.final_cost - ddp.final_cost).abs() / ddp.final_cost;
    assert!(rel <= 1e-4, "agd {} ddp {}", agd.final_cost, ddp.final_cost);
}

#[test]
fn plant_only_sees_applied_controls() {
    let task = common::lqr();
    let cfg = MpcConfig { sim_duration: 0.2, ..task.mpc(SolverKind::Agd) };
    let log = run_mpc(&task.ocp, &cfg, &SolverSettings::Agd(task.agd.clone()), &[]).unwrap();
    for w in log.records.windows(2) {
        let replay = plant_step(&task.ocp.model, &w[0].x, &w[0].u_applied, &[], w[0].t, cfg.control_dt).unwrap();
        assert_eq!(replay, w[1].x);
    }
}

#[test]
fn first_circle_cycle_improves_on_the_initial_guess() {
    let task = common::circle();
    let us0 = task.ocp.reference_controls();
    let j0 = task.ocp.rollout(&us0).unwrap().cost;
    let agd_budget = AgdSettings { max_iters: task.mpc(SolverKind::Agd).iters_per_cycle, ..task.agd.clone() };
    let ddp_budget = DdpSettings { max_iters: task.mpc(SolverKind::Ddp).iters_per_cycle, ..task.ddp.clone() };
    let zeros = AdamState::zeros(task.ocp.horizon, task.ocp.nu());
    let (agd, _) = agd_solve(&task.ocp, &us0, &zeros, &agd_budget).unwrap();
    let ddp = ddp_solve(&task.ocp, &us0, &ddp_budget).unwrap();
    assert!(agd.final_cost < j0, "agd {} vs {j0}", agd.final_cost);
    assert!(ddp.final_cost < j0, "ddp {} vs {j0}", ddp.final_cost);
}

#[test]
fn circle_closed_loop_is_reproducible() {
    let task = common::circle();
    for kind in [SolverKind::Agd, SolverKind::Ddp] {
        let cfg = MpcConfig { sim_duration: 0.1, ..task.mpc(kind) };
        let settings = match kind {
            SolverKind::Agd => SolverSettings::Agd(task.agd.clone()),
            SolverKind::Ddp => SolverSettings::Ddp(task.ddp.clone()),
        };
        let a = run_mpc(&task.ocp, &cfg, &settings, &task.disturbances).unwrap();
        let b = run_mpc(&task.ocp, &cfg, &settings, &task.disturbances).unwrap();
        assert_eq!(a.records.len(), 100);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!((ra.t, &ra.x, &ra.u_applied, ra.running_cost), (rb.t, &rb.x, &rb.u_applied, rb.running_cost));
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
        }
        assert_eq!(a.counters, b.counters);
    }
}
