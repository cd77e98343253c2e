//! CSV and JSON writers. Every file lands via a temp file and a rename.

use std::io::Write;
use std::path::Path;

use agdmpc::agd::IterRecord;
use agdmpc::bench::BenchCell;
use agdmpc::mpc::MpcLog;
use agdmpc::ocp::Trajectory;
use tempfile::NamedTempFile;

use crate::CliError;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Output(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn header(first: &str, n: usize, prefix: char) -> String {
    let mut h = first.to_string();
    for i in 0..n {
        h.push_str(&format!(",{prefix}{i}"));
    }
    h
}

/// One row per knot point; the terminal row leaves the control fields empty.
pub fn trajectory_csv(traj: &Trajectory, dt: f64) -> String {
    let nx = traj.xs[0].len();
    let nu = traj.us.first().map_or(0, |u| u.len());
    let mut out = header("t", nx, 'x') + &header("", nu, 'u') + "\n";
    for (k, x) in traj.xs.iter().enumerate() {
        out.push_str(&real(k as f64 * dt));
        for v in x.iter() {
            out.push(',');
            out.push_str(&real(*v));
        }
        for i in 0..nu {
            out.push(',');
            if let Some(u) = traj.us.get(k) {
                out.push_str(&real(u[i]));
            }
        }
        out.push('\n');
    }
    out
}

pub fn convergence_csv(log: &[IterRecord]) -> String {
    let mut out = String::from("iter,cost,grad_norm,wall_time_s\n");
    for (i, r) in log.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, real(r.cost), real(r.grad_norm), real(r.wall_time_s)));
    }
    out
}

/// Per-cycle log. Wall-clock solve times go to [`mpc_timing_csv`] so that
/// this file is reproducible byte for byte.
pub fn mpc_log_csv(log: &MpcLog) -> String {
    let nx = log.records.first().map_or(0, |r| r.x.len());
    let nu = log.records.first().map_or(0, |r| r.u_applied.len());
    let mut out = header("t", nx, 'x') + &header("", nu, 'u') + ",running_cost,ee_err,grad_norm,iters\n";
    for r in &log.records {
        out.push_str(&real(r.t));
        for v in r.x.iter().chain(r.u_applied.iter()) {
            out.push(',');
            out.push_str(&real(*v));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            real(r.running_cost),
            real(r.ee_error),
            real(r.grad_norm),
            r.iterations
        ));
    }
    out
}

pub fn mpc_timing_csv(log: &MpcLog) -> String {
    let mut out = String::from("t,solve_time_s\n");
    for r in &log.records {
        out.push_str(&format!("{},{}\n", real(r.t), real(r.solve_time_s)));
    }
    out
}

pub fn bench_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from("solver,T,median_iter_time_s,iters_timed\n");
    for c in cells {
        let name = serde_json::to_value(c.solver).expect("solver kind serializes");
        out.push_str(&format!(
            "{},{},{},{}\n",
            name.as_str().unwrap_or_default(),
            c.horizon,
            real(c.median_iter_time_s),
            c.iters_timed
        ));
    }
    out
}
