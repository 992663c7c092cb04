//! Structure-exploiting convex QP solver for finite-horizon optimal control.
//!
//! The solver computes search directions for box-constrained optimal control
//! problems through a Riccati factorization of the stage-wise KKT system.
//! Between active-set iterations the factorization is *modified* with low-rank
//! up/downdates instead of being recomputed, which keeps the per-iteration
//! cost linear in the last changed stage rather than in the horizon length.
//!
//! Module map:
//!
//! - [`linalg`] — dense symmetric-PSD primitives: singularity-tolerant
//!   factorization, minimum-norm pseudo-solves, rank-1 Cholesky
//!   modifications, Sherman–Morrison–Woodbury solves and the generalized
//!   Schur complement.
//! - [`riccati`] — the equality-constrained subproblem and its solution via
//!   Riccati factorization plus backward/forward substitutions.
//! - [`lowrank`] — propagation of low-rank cost-to-go modifications and the
//!   working-set add/remove steps, including the recompute fallback.
//! - [`asqp`] — a primal active-set solver for box-constrained problems that
//!   reuses the factorization across iterations.
//! - [`dualize`] — transformation of general state-constrained problems into
//!   their dual (which has input bounds only) and primal recovery.
//! - [`gen`] — deterministic random problem generators used by tests and the
//!   benchmark harness.

pub mod asqp;
pub mod dualize;
pub mod gen;
pub mod linalg;
pub mod lowrank;
pub mod riccati;

pub use nalgebra;
