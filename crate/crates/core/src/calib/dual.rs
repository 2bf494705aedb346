use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CalibError, CalibrationResult, RhoFamily};
use crate::basis::BasisMatrix;
use crate::dataset::Dataset;

/// The five weight families.
///
/// | kind          | arm     | target                                  |
/// |---------------|---------|-----------------------------------------|
/// | `FitP`        | treated | `(1/N) Σ u(X_i)`                        |
/// | `FitQ`        | control | `(1/N) Σ u(X_i)`                        |
/// | `FitR`        | treated | `Σ (1-T_i) q̂(X_i) v(X_i, M_i)`          |
/// | `FitW`        | control | `Σ T_i p̂(X_i) v(X_i, M_i)`              |
/// | `FitRTilde`   | treated | `Σ (1-T_i) v(X_i, M_i) / (N (1 - T̄))`   |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualKind {
    FitP,
    FitQ,
    FitR,
    FitW,
    FitRTilde,
}

impl DualKind {
    pub const ALL: [DualKind; 5] = [
        DualKind::FitP,
        DualKind::FitQ,
        DualKind::FitR,
        DualKind::FitW,
        DualKind::FitRTilde,
    ];

    /// `true` when the weights live on the treated arm.
    pub fn calibrates_treated(self) -> bool {
        matches!(self, DualKind::FitP | DualKind::FitR | DualKind::FitRTilde)
    }

    /// The fit whose weights enter this program's target.
    pub fn prerequisite(self) -> Option<DualKind> {
        match self {
            DualKind::FitR => Some(DualKind::FitQ),
            DualKind::FitW => Some(DualKind::FitP),
            _ => None,
        }
    }
}

impl fmt::Display for DualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DualKind::FitP => "fit_p",
            DualKind::FitQ => "fit_q",
            DualKind::FitR => "fit_r",
            DualKind::FitW => "fit_w",
            DualKind::FitRTilde => "fit_r_tilde",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct DualProblem {
    pub kind: DualKind,
    pub design: DMatrix<f64>,
    pub treated: Vec<bool>,
    pub target: DVector<f64>,
    pub rho: RhoFamily,
}

impl DualProblem {
    pub fn new(
        kind: DualKind,
        design: DMatrix<f64>,
        treated: Vec<bool>,
        target: DVector<f64>,
        rho: RhoFamily,
    ) -> Result<Self, CalibError> {
        if design.nrows() != treated.len() {
            return Err(CalibError::Invalid(format!(
                "design has {} rows but treatment has {}",
                design.nrows(),
                treated.len()
            )));
        }
        if target.len() != design.ncols() {
            return Err(CalibError::Invalid(format!(
                "target has length {} but design has {} columns",
                target.len(),
                design.ncols()
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Invalid("target is not finite".into()));
        }
        Ok(Self {
            kind,
            design,
            treated,
            target,
            rho,
        })
    }

    pub fn n(&self) -> usize {
        self.treated.len()
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    #[inline]
    pub fn in_arm(&self, i: usize) -> bool {
        self.treated[i] == self.kind.calibrates_treated()
    }

    /// Row indices of the calibrated arm.
    pub fn arm_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.in_arm(i)).collect()
    }
}

/// Assembles the program of `kind`. `prior` must be the converged `fit_q`
/// result for `fit_r` and the `fit_p` result for `fit_w`.
pub fn build_dual(
    kind: DualKind,
    dataset: &Dataset,
    design: &BasisMatrix,
    prior: Option<&CalibrationResult>,
    rho: RhoFamily,
) -> Result<DualProblem, CalibError> {
    let v = &design.values;
    let n = dataset.n();
    if v.nrows() != n {
        return Err(CalibError::Invalid(format!(
            "design has {} rows, dataset has {n}",
            v.nrows()
        )));
    }
    let target = match kind {
        DualKind::FitP | DualKind::FitQ => v.row_mean().transpose(),
        DualKind::FitR | DualKind::FitW => {
            let needs = kind.prerequisite().expect("fit_r and fit_w have prerequisites");
            let prior = match prior {
                Some(p) if p.kind == needs && p.converged => p,
                _ => return Err(CalibError::MissingPrerequisite { kind, needs }),
            };
            if prior.weights.len() != n {
                return Err(CalibError::Invalid(
                    "prior weights do not match the sample".into(),
                ));
            }
            v.tr_mul(&prior.weights)
        }
        DualKind::FitRTilde => {
            let controls = dataset.n_control() as f64;
            let mut sum = DVector::zeros(v.ncols());
            for i in (0..n).filter(|&i| !dataset.treated()[i]) {
                sum += v.row(i).transpose();
            }
            sum / controls
        }
    };
    DualProblem::new(kind, v.clone(), dataset.treated().to_vec(), target, rho)
}
