//! Consensus ADMM with inexact, preconditioned local steps.
//!
//! A server holds the global iterate `w`; each client holds a local copy
//! `w_i`, a dual variable `pi_i` and a penalty `sigma_i` that grows on a
//! gated geometric schedule. Every iteration the server aggregates, then
//! each client takes one preconditioned gradient step on its shard and
//! updates its dual. The preconditioner family decides the variant:
//! identity, clipped Hessian, clipped second moments, or orthogonalized
//! momentum.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diagnostics;
mod error;
pub mod linalg;
pub mod newton_schulz;
pub mod params;
pub mod partition;
pub mod pisa;
pub mod preconditioners;
pub mod problems;

pub use error::{Error, Result};
pub use params::{BlockShape, Layout, ParamBlock};
pub use partition::Partition;
pub use pisa::{ClientParams, Pisa, PisaConfig, RunStatus, Trajectory};
pub use preconditioners::{MomentScheme, Preconditioner, PreconditionerKind};
pub use problems::{Dataset, Problem, ProblemKind, Targets};
