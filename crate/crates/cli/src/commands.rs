use std::path::PathBuf;

use agdmpc::agd::{agd_solve, AdamState, SolveStatus};
use agdmpc::bench::bench_cell;
use agdmpc::ddp::ddp_solve;
use agdmpc::gradcheck::{default_models, run_gradcheck, GradcheckOptions};
use agdmpc::mpc::{metrics, run_mpc, MpcStatus, SolverSettings};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::output::{self, write_atomic};
use crate::{CliError, Common, Solver};

pub const BENCH_AGD_ITERS: usize = 200;
pub const BENCH_DDP_ITERS: usize = 50;
pub const BENCH_WARMUP: usize = 10;

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let (Some(seed), Some(mpc)) = (common.seed, cfg.mpc.as_mut()) {
        mpc.seed = seed;
    }
    let dir = cfg.output_dir.clone();
    Ok((cfg, dir))
}

fn solver_settings(cfg: &ExperimentConfig, solver: Solver) -> SolverSettings {
    match solver {
        Solver::Agd => SolverSettings::Agd(cfg.agd.clone()),
        Solver::Ddp => SolverSettings::Ddp(cfg.ddp.clone()),
    }
}

fn solver_name(solver: Solver) -> &'static str {
    match solver {
        Solver::Agd => "agd",
        Solver::Ddp => "ddp",
    }
}

pub fn solve(common: &Common, solver: Solver) -> Result<(), CliError> {
    let (cfg, dir) = load(common)?;
    let ocp = cfg.ocp_def();
    let us0 = ocp.reference_controls();
    let res = match solver {
        Solver::Agd => agd_solve(&ocp, &us0, &AdamState::zeros(ocp.horizon, ocp.nu()), &cfg.agd)?.0,
        Solver::Ddp => ddp_solve(&ocp, &us0, &cfg.ddp)?,
    };
    write_atomic(&dir.join("trajectory.csv"), output::trajectory_csv(&res.traj, ocp.dt).as_bytes())?;
    write_atomic(&dir.join("convergence.csv"), output::convergence_csv(&res.per_iter_log).as_bytes())?;
    let summary = json!({
        "solver": solver_name(solver),
        "final_cost": res.final_cost,
        "grad_norm": res.grad_norm,
        "iterations_run": res.iterations_run,
        "accepted_steps": res.accepted_steps,
        "status": res.status,
        "config_hash": cfg.hash(),
    });
    write_atomic(&dir.join("summary.json"), pretty(&summary).as_bytes())?;
    println!(
        "{} final_cost={} grad_norm={:.3e} iterations={} status={:?}",
        solver_name(solver),
        output::real(res.final_cost),
        res.grad_norm,
        res.iterations_run,
        res.status
    );
    if res.status == SolveStatus::Diverged {
        return Err(CliError::Diverged(format!("{} diverged; last finite iterate written", solver_name(solver))));
    }
    Ok(())
}

pub fn mpc(common: &Common, solver: Solver, disturb: bool) -> Result<(), CliError> {
    let (cfg, dir) = load(common)?;
    let Some(mpc_cfg) = cfg.mpc.as_ref().map(|m| m.resolve(solver)) else {
        return Err(CliError::Invalid(format!("{}: config has no mpc section", common.config.display())));
    };
    let events = if disturb { cfg.disturbances.clone() } else { Vec::new() };
    let log = run_mpc(&cfg.ocp_def(), &mpc_cfg, &solver_settings(&cfg, solver), &events)?;
    let summary = metrics(&log, &events);
    write_atomic(&dir.join("mpc_log.csv"), output::mpc_log_csv(&log).as_bytes())?;
    write_atomic(&dir.join("mpc_timing.csv"), output::mpc_timing_csv(&log).as_bytes())?;
    let report = json!({
        "solver": solver_name(solver),
        "seed": log.seed,
        "config_hash": cfg.hash(),
        "status": log.status,
        "cycles": log.records.len(),
        "iters_per_cycle": mpc_cfg.iters_per_cycle,
        "mean_running_cost": summary.mean_running_cost,
        "rms_ee_error": summary.rms_ee_error,
        "max_solve_time_s": summary.max_solve_time_s,
        "divergence_count": summary.divergence_count,
        "recovery_times": summary.recovery_times,
        "counters": log.counters,
    });
    write_atomic(&dir.join("summary.json"), pretty(&report).as_bytes())?;
    println!(
        "{} cycles={} mean_running_cost={:.6e} rms_ee_error={:.6e} divergences={} recovery={:?}",
        solver_name(solver),
        log.records.len(),
        summary.mean_running_cost,
        summary.rms_ee_error,
        summary.divergence_count,
        summary.recovery_times
    );
    if log.status == MpcStatus::PlantDiverged {
        return Err(CliError::Diverged(format!(
            "plant diverged after {} cycles; partial log written",
            log.records.len()
        )));
    }
    Ok(())
}

pub fn gradcheck(common: &Common, corrupt_jacobian: bool) -> Result<(), CliError> {
    let (cfg, _) = load(common)?;
    let mut models = default_models();
    for m in models.iter_mut() {
        if m.kind() == cfg.model.kind() {
            *m = cfg.model.clone();
        }
    }
    let opts = GradcheckOptions { seed: common.seed.unwrap_or(0), corrupt_jacobian, ..GradcheckOptions::default() };
    let lines = run_gradcheck(&models, &opts)?;
    for l in &lines {
        let model = serde_json::to_value(l.model).expect("model kind serializes");
        println!(
            "{:<18} {:<18} max_rel_err={:.3e} {}",
            model.as_str().unwrap_or_default(),
            l.check,
            l.max_rel_err,
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| format!("{:?}/{} ({:.3e})", l.model, l.check, l.max_rel_err))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("above {:e}: {}", opts.threshold, failed.join(", "))))
    }
}

pub fn bench(common: &Common, horizons: &[usize]) -> Result<(), CliError> {
    if horizons.len() < 2 {
        return Err(CliError::Invalid("bench needs at least two horizons".into()));
    }
    if horizons[0] == 0 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Invalid("horizons must be positive and strictly ascending".into()));
    }
    let (cfg, dir) = load(common)?;
    let ocp = cfg.ocp_def();
    let mut cells = Vec::new();
    for &t in horizons {
        let agd = bench_cell(&ocp, t, &SolverSettings::Agd(cfg.agd.clone()), BENCH_AGD_ITERS, BENCH_WARMUP)?;
        let ddp = bench_cell(&ocp, t, &SolverSettings::Ddp(cfg.ddp.clone()), BENCH_DDP_ITERS, BENCH_WARMUP)?;
        println!(
            "T={t:<5} agd={:.3e}s ddp={:.3e}s ddp/agd={:.2}",
            agd.median_iter_time_s,
            ddp.median_iter_time_s,
            ddp.median_iter_time_s / agd.median_iter_time_s
        );
        cells.push(agd);
        cells.push(ddp);
    }
    for k in 1..horizons.len() {
        let (a0, d0) = (&cells[2 * (k - 1)], &cells[2 * (k - 1) + 1]);
        let (a1, d1) = (&cells[2 * k], &cells[2 * k + 1]);
        println!(
            "T {}->{} (x{:.2}): agd time x{:.2}, ddp time x{:.2}",
            horizons[k - 1],
            horizons[k],
            horizons[k] as f64 / horizons[k - 1] as f64,
            a1.median_iter_time_s / a0.median_iter_time_s,
            d1.median_iter_time_s / d0.median_iter_time_s
        );
    }
    write_atomic(&dir.join("bench.csv"), output::bench_csv(&cells).as_bytes())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}
