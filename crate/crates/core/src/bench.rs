//! Per-iteration timing for both solvers.
//!
//! Both solvers are timed the same way: repeated short solves of
//! `CHUNK_ITERS` iterations from the same initial guess, mirroring how they
//! run inside the closed loop. Each iteration's wall time comes from the
//! solver's own log, so the initial rollout of every solve is excluded. The
//! first `warmup` iterations are discarded and the median of the rest is
//! reported.

use serde::Serialize;

use crate::agd::{agd_solve, AdamState, AgdSettings};
use crate::ddp::{ddp_solve, DdpSettings};
use crate::error::{invalid, Result};
use crate::mpc::{SolverKind, SolverSettings};
use crate::ocp::OcpDef;

pub const CHUNK_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub solver: SolverKind,
    pub horizon: usize,
    pub median_iter_time_s: f64,
    pub iters_timed: usize,
}

/// Times `iters` iterations of one solver on `template` resized to `horizon`.
pub fn bench_cell(
    template: &OcpDef,
    horizon: usize,
    settings: &SolverSettings,
    iters: usize,
    warmup: usize,
) -> Result<BenchCell> {
    if iters == 0 || horizon == 0 {
        return Err(invalid("bench needs a positive horizon and iteration count"));
    }
    let ocp = OcpDef { horizon, ..template.clone() };
    ocp.validate()?;
    let us = ocp.reference_controls();
    let mut times = Vec::with_capacity(iters + warmup + CHUNK_ITERS);
    while times.len() < iters + warmup {
        let log = match settings {
            SolverSettings::Agd(s) => {
                let s = AgdSettings { max_iters: CHUNK_ITERS, grad_tol: 0.0, ..s.clone() };
                agd_solve(&ocp, &us, &AdamState::zeros(horizon, ocp.nu()), &s)?.0.per_iter_log
            }
            SolverSettings::Ddp(s) => {
                let s = DdpSettings { max_iters: CHUNK_ITERS, grad_tol: 0.0, ..s.clone() };
                ddp_solve(&ocp, &us, &s)?.per_iter_log
            }
        };
        times.extend(log.iter().map(|r| r.wall_time_s));
    }
    let mut timed = times.split_off(warmup);
    timed.truncate(iters);
    Ok(BenchCell { solver: settings.kind(), horizon, median_iter_time_s: median(&mut timed), iters_timed: timed.len() })
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
