//! Filter-based system level tube MPC for linear systems with polytopic
//! parametric and additive uncertainty.
//!
//! Modules, bottom-up: [`lp`] and [`qp`] wrap the numerical backends,
//! [`polytope`] is the set calculus, [`sysmodel`] holds problem data,
//! [`invariant`] builds terminal sets, [`slp`] is the block operator algebra,
//! [`sltmpc`] assembles the MPC programs, [`asynchronous`] implements the
//! two-process scheme and [`sim`] runs closed loops.

pub mod lp;
pub mod polytope;
pub mod qp;
pub mod sysmodel;
pub mod invariant;
pub mod slp;
pub mod sltmpc;
pub mod asynchronous;
pub mod sim;

/// Library version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
