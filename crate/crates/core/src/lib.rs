//! Numerical toolkit for the finite-fuel expected-utility liquidation problem.
//!
//! The value function `w(τ, x, r)` (remaining time, position, revenue) solves
//! a degenerate parabolic HJB equation whose initial condition is singular:
//! `u(r)` at `x = 0` and `-∞` elsewhere. This crate
//!
//! * marches a monotone finite-difference scheme for that equation from a
//!   regularized initial slice ([`solver`]),
//! * extracts the feedback liquidation speed and simulates the controlled
//!   position/revenue dynamics ([`policy`]),
//! * computes deterministic CARA benchmarks ([`oracle`]), and
//! * runs structural checks (bounds, dynamic programming, jet consistency)
//!   against solved fields and simulated paths ([`verify`]).

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod cost;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod solver;
pub mod verify;

pub use cost::{ConvexCost, CostError, CostTable};
pub use model::{MarketModel, ModelError, Utility};
pub use oracle::{CaraEnvelope, OracleError, OracleSummary, Trajectory};
pub use solver::{Grid, Scheme, SolverConfig, SolverError, ValueField};
pub use policy::{FeedbackPolicy, PathRecord, PolicyError, SimSettings, TradingRule};
pub use verify::{CheckReport, VerifyError};
