//! Batch front end for `mediate-calib`: estimation on CSV data, simulation
//! studies on synthetic DGPs and the generator self-checks.

pub mod args;
pub mod commands;
pub mod config;
pub mod report;

use mediate_calib::basis::BasisError;
use mediate_calib::calib::CalibError;
use mediate_calib::dataset::DatasetError;
use mediate_calib::mediation::MediationError;
use mediate_calib::oracle::OracleError;
use mediate_calib::variance::VarianceError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
    pub const SINGULAR: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mediation(#[from] MediationError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error("{0}")]
    CheckFailed(String),
}

fn calib_code(e: &CalibError) -> i32 {
    match e {
        CalibError::NotConverged { .. } | CalibError::DomainViolation { .. } => exit::CONVERGENCE,
        CalibError::SingularHessian { .. } => exit::SINGULAR,
        _ => exit::FAILURE,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Dataset(_) => exit::INPUT,
            CliError::Mediation(m) => match m {
                MediationError::Dataset(_) | MediationError::Config(_) | MediationError::MissingPriorMediator => {
                    exit::INPUT
                }
                MediationError::Basis(BasisError::InfeasibleDim { .. }) => exit::INPUT,
                MediationError::Basis(_) => exit::FAILURE,
                MediationError::Calib(c) => calib_code(c),
                MediationError::NotConverged(_) => exit::CONVERGENCE,
                MediationError::WrongWeights { .. } => exit::FAILURE,
            },
            CliError::Variance(VarianceError::SingularMoment { .. }) => exit::SINGULAR,
            CliError::Variance(VarianceError::InvalidLevel(_)) => exit::INPUT,
            CliError::Variance(_) => exit::FAILURE,
            CliError::Oracle(OracleError::Dataset(_)) => exit::FAILURE,
            CliError::Oracle(_) => exit::INPUT,
            CliError::Output(_) | CliError::CheckFailed(_) => exit::FAILURE,
        }
    }
}
