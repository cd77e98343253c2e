//! Trajectory optimization for model predictive control with a first-order
//! solver (adjoint gradients plus ADAM, no line search) and a Gauss-Newton
//! DDP baseline, together with the models, costs and closed-loop simulator
//! used to compare them.
//!
//! ```
//! use agdmpc::agd::{agd_solve, AdamState, AgdSettings};
//! use agdmpc::cost::{CostWeights, ReferenceSpec};
//! use agdmpc::dynamics::{ModelSpec, StateVec};
//! use agdmpc::ocp::OcpDef;
//!
//! let model = ModelSpec::double_integrator();
//! let weights = CostWeights { q_diag: vec![1.0, 0.5], r_diag: vec![0.1], w_ee: 0.0, terminal_scale: 10.0 };
//! let ocp = OcpDef::new(model.clone(), weights, ReferenceSpec::regulation(&model), 20, 0.1,
//!     StateVec::from_column_slice(&[1.0, 0.0])).unwrap();
//! let settings = AgdSettings { max_iters: 500, ..AgdSettings::default() };
//! let (res, _moments) = agd_solve(&ocp, &ocp.zero_controls(), &AdamState::zeros(20, 1), &settings).unwrap();
//! assert!(res.final_cost < ocp.rollout(&ocp.zero_controls()).unwrap().cost);
//! ```

// Index loops mirror the textbook recursions in the numerical kernels.
#![allow(clippy::needless_range_loop)]

pub mod agd;
pub mod bench;
pub mod cost;
pub mod ddp;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod instrument;
pub mod mpc;
pub mod ocp;

pub use error::{Error, Result};
