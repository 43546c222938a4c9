//! Reconstruction of the obstacle function `b(x)` in a mean-field game
//!
//! ```text
//! −∂ₜu − εΔu + ½|∇u|² = b(x) + F(m),    u(·,T) = u_T
//!  ∂ₜm − εΔm − div(m∇u) = 0,            m(·,0) = m₀
//! ```
//!
//! on the periodic unit torus in one or two dimensions, from observations of
//! the value function (`u(·,0)` or `∂ₜu(·,T)`).
//!
//! Two reconstruction methods are provided:
//!
//! * [`inverse::policy_iteration_inverse`] alternates a linear FP solve, a
//!   *linear* inverse source problem for the HJB equation with the policy
//!   frozen, and a policy update `q ← ∇u`. For `∂ₜu(·,T)` data the middle
//!   step has a closed form; for `u(·,0)` data it is a convex quadratic
//!   problem solved by BFGS with adjoint gradients.
//! * [`direct_ls::direct_ls_solve`] minimises the data misfit subject to the
//!   full nonlinear MFG, with gradients from the coupled adjoint system.
//!
//! The discretisation uses implicit Euler in time, centered Laplacians, and
//! Engquist–Osher upwinding with a Fokker–Planck transport that is the exact
//! transpose of the HJB transport, so mass is conserved to round-off and the
//! discrete adjoints are exact.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod direct_ls;
pub mod experiment;
pub mod field;
pub mod forward;
pub mod grid;
pub mod inverse;
pub mod optim;
pub mod pde;
pub mod sparse;

pub use field::{PolicyField, ScalarField};
pub use forward::{DataKind, InverseData, MfgSolution, TerminalRateScheme};
pub use grid::{make_grid, Grid};
pub use inverse::InverseResult;
pub use pde::{Coupling, MfgProblem};

/// Library version recorded in experiment summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("singular system: {0}")]
    SingularMatrix(String),
    #[error("{what} did not converge after {iterations} iterations (last change {last:.3e})")]
    NotConverged { what: &'static str, iterations: usize, last: f64 },
    #[error(transparent)]
    Optimizer(#[from] optim::OptimError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
