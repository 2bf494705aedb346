//! Calibration weights from the unconstrained concave dual programs.
//!
//! Each program maximizes
//!
//! ```text
//! (1/N) Σ_{i in arm} ρ(coefᵀ b_i) − coefᵀ target
//! ```
//!
//! over `coef`, where `b_i` is a row of the design matrix. At the maximizer
//! the weights `ρ'(coefᵀ b_i) / N` on the calibrated arm reproduce `target`
//! exactly, which is the balance constraint of the matching primal program.

mod check;
mod dual;
mod rho;
mod solver;

pub use check::{run_checks, CheckOutcome, DUALITY_GRID_POINTS};
pub use dual::{build_dual, DualKind, DualProblem};
pub use rho::{induced_distance, ConcaveGenerator, RhoFamily};
pub use solver::{
    check_first_order, dual_gradient, dual_objective, solve_dual, solve_dual_from,
    CalibrationResult, SolverOptions, WeightDiagnostics,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("weight {w} is outside the range of rho'")]
    OutOfRange { w: f64 },
    #[error("{kind} requires a converged {needs} fit")]
    MissingPrerequisite { kind: DualKind, needs: DualKind },
    #[error("dual Hessian is singular even after ridge regularization (arm rows: {arm_rows}, dim: {dim})")]
    SingularHessian { arm_rows: usize, dim: usize },
    #[error("{kind} did not converge in {iterations} iterations (gradient max-norm {gradient_inf:.3e})")]
    NotConverged {
        kind: DualKind,
        iterations: usize,
        gradient_inf: f64,
        partial: Box<CalibrationResult>,
    },
    #[error("empirical-likelihood step cannot keep all arguments above -1 (min argument {min_arg:.3e}); overlap looks poor")]
    DomainViolation { min_arg: f64 },
    #[error("invalid dual problem: {0}")]
    Invalid(String),
}
