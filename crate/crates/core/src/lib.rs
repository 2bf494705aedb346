//! Natural direct and indirect causal mediation effects estimated by
//! nonparametric empirical covariate balancing.
//!
//! The pipeline: validate a sample ([`dataset`]), map covariates and mediators
//! onto `[-1, 1]` and evaluate orthonormal polynomial sieves ([`basis`]),
//! solve the concave dual calibration programs for weights ([`calib`]),
//! combine the weights into effect estimates ([`mediation`]) and attach the
//! plug-in sandwich variance ([`variance`]). [`oracle`] supplies synthetic
//! data-generating processes with exactly computable truths.

pub mod basis;
pub mod calib;
pub mod dataset;
pub mod mediation;
pub mod oracle;
pub mod variance;

mod linalg;

pub use calib::{RhoFamily, SolverOptions};
pub use dataset::Dataset;
pub use mediation::{fit, EstimandSet, MediationConfig, MediationFit};

