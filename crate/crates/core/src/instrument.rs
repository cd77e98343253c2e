//! Per-thread evaluation counters.
//!
//! Solvers run single-threaded, so a thread-local tally taken before and
//! after a call attributes every evaluation to that call even when other
//! solves run concurrently on other threads.

use std::cell::Cell;
use std::ops::Sub;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Calls to `OcpDef::total_cost` (every rollout stamps its cost once).
    pub objective_evals: u64,
    /// Dynamics linearizations (one per time step per gradient or backward pass).
    pub jacobian_evals: u64,
    /// Gauss-Newton cost Hessian evaluations.
    pub gn_hessian_evals: u64,
}

impl Sub for Counters {
    type Output = Counters;

    fn sub(self, rhs: Counters) -> Counters {
        Counters {
            objective_evals: self.objective_evals - rhs.objective_evals,
            jacobian_evals: self.jacobian_evals - rhs.jacobian_evals,
            gn_hessian_evals: self.gn_hessian_evals - rhs.gn_hessian_evals,
        }
    }
}

impl std::ops::Add for Counters {
    type Output = Counters;

    fn add(self, rhs: Counters) -> Counters {
        Counters {
            objective_evals: self.objective_evals + rhs.objective_evals,
            jacobian_evals: self.jacobian_evals + rhs.jacobian_evals,
            gn_hessian_evals: self.gn_hessian_evals + rhs.gn_hessian_evals,
        }
    }
}

thread_local! {
    static COUNTERS: Cell<Counters> = const { Cell::new(Counters {
        objective_evals: 0,
        jacobian_evals: 0,
        gn_hessian_evals: 0,
    }) };
}

pub fn snapshot() -> Counters {
    COUNTERS.with(Cell::get)
}

fn bump(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn objective() {
    bump(|c| c.objective_evals += 1);
}

pub(crate) fn jacobian() {
    bump(|c| c.jacobian_evals += 1);
}

pub(crate) fn gn_hessian() {
    bump(|c| c.gn_hessian_evals += 1);
}
