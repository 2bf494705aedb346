//! Weighting estimators of the mediation estimands.
//!
//! With `p̂, q̂` the covariate-balancing weights on the treated and control
//! arms and `r̂, ŵ` the weights that additionally balance mediator functions:
//!
//! * `δ̂₁ = Σ T p̂ Y`, `δ̂₀ = Σ (1-T) q̂ Y`
//! * `θ̂₀ = Σ T r̂ Y` estimates `E[Y(1, M(0))]`
//! * `θ̂₁ = Σ (1-T) ŵ Y` estimates `E[Y(0, M(1))]`
//! * `NIE = δ̂₁ - θ̂₀`, `NDE = θ̂₀ - δ̂₀`, `PIE = θ̂₁ - δ̂₀`, `ATE = δ̂₁ - δ̂₀`
//!
//! When a causally prior mediator `W` is present, `(W, M)` is the mediator
//! block for the single-mediator estimands and the ATE additionally splits
//! into a path through `W`, a path through `M` and a direct part.

use serde::Serialize;
use thiserror::Error;

use crate::basis::{self, BasisError, BasisMatrix};
use crate::calib::{
    build_dual, solve_dual, CalibError, CalibrationResult, DualKind, RhoFamily, SolverOptions,
};
use crate::dataset::{self, fit_scaling, Dataset, DatasetError, ScalingMap};

#[derive(Debug, Error)]
pub enum MediationError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("{0} weights did not converge")]
    NotConverged(DualKind),
    #[error("weights of kind {got} cannot estimate {wanted}")]
    WrongWeights { got: DualKind, wanted: &'static str },
    #[error("the dataset has no causally prior mediator")]
    MissingPriorMediator,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Point estimates. Contrasts are formed from the same potential-outcome
/// means, so `nie + nde == ate` up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimandSet {
    pub delta1: f64,
    pub delta0: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub nie: f64,
    pub nde: f64,
    pub pie: f64,
    pub ate: f64,
    pub ndeu: Option<f64>,
    pub multimediator: Option<PathEffects>,
}

impl EstimandSet {
    pub fn from_means(delta1: f64, delta0: f64, theta0: f64, theta1: f64) -> Self {
        Self {
            delta1,
            delta0,
            theta0,
            theta1,
            nie: delta1 - theta0,
            nde: theta0 - delta0,
            pie: theta1 - delta0,
            ate: delta1 - delta0,
            ndeu: None,
            multimediator: None,
        }
    }
}

/// Path-specific split of the ATE with a causally prior mediator `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathEffects {
    /// `E[Y(1, W(0), M(1, W(0)))]`.
    pub theta_w: f64,
    pub path_w: f64,
    pub path_m: f64,
    pub direct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NdeuEstimate {
    /// `θ̂'₁ = Σ T r̃ Y`.
    pub theta1_prime: f64,
    /// Control-arm mean of `Y`.
    pub delta0_prime: f64,
    pub ndeu: f64,
}

fn require(result: &CalibrationResult, kind: DualKind, wanted: &'static str) -> Result<(), MediationError> {
    if result.kind != kind {
        return Err(MediationError::WrongWeights {
            got: result.kind,
            wanted,
        });
    }
    if !result.converged {
        return Err(MediationError::NotConverged(kind));
    }
    Ok(())
}

fn weighted_outcome(d: &Dataset, result: &CalibrationResult) -> f64 {
    result.weights.dot(d.y())
}

/// `δ̂₁ = Σ T p̂ Y` for `treated_arm = true`, `δ̂₀ = Σ (1-T) q̂ Y` otherwise.
pub fn estimate_delta(treated_arm: bool, d: &Dataset, result: &CalibrationResult) -> Result<f64, MediationError> {
    if treated_arm {
        require(result, DualKind::FitP, "delta1")?;
    } else {
        require(result, DualKind::FitQ, "delta0")?;
    }
    Ok(weighted_outcome(d, result))
}

/// `θ̂₀ = Σ T r̂ Y`.
pub fn estimate_theta0(d: &Dataset, r: &CalibrationResult) -> Result<f64, MediationError> {
    require(r, DualKind::FitR, "theta0")?;
    Ok(weighted_outcome(d, r))
}

/// `θ̂₁ = Σ (1-T) ŵ Y`.
pub fn estimate_theta1(d: &Dataset, w: &CalibrationResult) -> Result<f64, MediationError> {
    require(w, DualKind::FitW, "theta1")?;
    Ok(weighted_outcome(d, w))
}

pub fn estimate_ndeu(d: &Dataset, r_tilde: &CalibrationResult) -> Result<NdeuEstimate, MediationError> {
    require(r_tilde, DualKind::FitRTilde, "ndeu")?;
    let theta1_prime = weighted_outcome(d, r_tilde);
    let (sum, count) = d
        .treated()
        .iter()
        .zip(d.y().iter())
        .filter(|(&t, _)| !t)
        .fold((0.0, 0usize), |(s, c), (_, &y)| (s + y, c + 1));
    let delta0_prime = sum / count as f64;
    Ok(NdeuEstimate {
        theta1_prime,
        delta0_prime,
        ndeu: theta1_prime - delta0_prime,
    })
}

/// Weights needed for the path-specific split.
pub struct MultiMediatorFits<'a> {
    pub p: &'a CalibrationResult,
    pub q: &'a CalibrationResult,
    /// `fit_r` over a basis of `(X, W)` only.
    pub r_w: &'a CalibrationResult,
    /// `fit_r` over a basis of `(X, W, M)`.
    pub r_wm: &'a CalibrationResult,
}

pub fn estimate_multimediator(d: &Dataset, fits: &MultiMediatorFits<'_>) -> Result<PathEffects, MediationError> {
    if d.w().is_none() {
        return Err(MediationError::MissingPriorMediator);
    }
    let delta1 = estimate_delta(true, d, fits.p)?;
    let delta0 = estimate_delta(false, d, fits.q)?;
    require(fits.r_w, DualKind::FitR, "theta_w")?;
    let theta_w = weighted_outcome(d, fits.r_w);
    let theta0 = estimate_theta0(d, fits.r_wm)?;
    Ok(PathEffects {
        theta_w,
        path_w: delta1 - theta_w,
        path_m: theta_w - theta0,
        direct: theta0 - delta0,
    })
}

/// Pipeline settings. `None` dimensions fall back to
/// [`basis::default_dims`].
#[derive(Debug, Clone, PartialEq)]
pub struct MediationConfig {
    pub rho: RhoFamily,
    pub basis_dim: Option<usize>,
    pub mediator_basis_dim: Option<usize>,
    pub solver: SolverOptions,
    pub ndeu: bool,
    pub multimediator: bool,
}

impl Default for MediationConfig {
    fn default() -> Self {
        Self {
            rho: RhoFamily::ExponentialTilting,
            basis_dim: None,
            mediator_basis_dim: None,
            solver: SolverOptions::default(),
            ndeu: true,
            multimediator: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimsReport {
    pub k_requested: usize,
    pub l_requested: usize,
    pub k: usize,
    pub l: usize,
    pub l_prior: Option<usize>,
    pub defaulted: bool,
}

#[derive(Debug, Clone)]
pub struct Bases {
    /// `u_K(X)`.
    pub u: BasisMatrix,
    /// `v_K(X, M)` (or `(X, W, M)` with a prior mediator).
    pub v: BasisMatrix,
    /// Basis over `(X, W)`, present for the path-specific split.
    pub v_prior: Option<BasisMatrix>,
}

#[derive(Debug, Clone)]
pub struct Fits {
    pub p: CalibrationResult,
    pub q: CalibrationResult,
    pub r: CalibrationResult,
    pub w: CalibrationResult,
    pub r_tilde: Option<CalibrationResult>,
    pub r_prior: Option<CalibrationResult>,
}

impl Fits {
    pub fn all(&self) -> Vec<&CalibrationResult> {
        let mut v = vec![&self.p, &self.q, &self.r, &self.w];
        v.extend(self.r_tilde.as_ref());
        v.extend(self.r_prior.as_ref());
        v
    }
}

/// Everything produced by one run of the estimator.
#[derive(Debug, Clone)]
pub struct MediationFit {
    pub config: MediationConfig,
    pub scaling: ScalingMap,
    /// The input after scaling; bases and weights index its rows.
    pub scaled: Dataset,
    pub dims: DimsReport,
    pub bases: Bases,
    pub fits: Fits,
    pub estimates: EstimandSet,
}

fn solve(
    kind: DualKind,
    d: &Dataset,
    design: &BasisMatrix,
    prior: Option<&CalibrationResult>,
    config: &MediationConfig,
) -> Result<CalibrationResult, MediationError> {
    let problem = build_dual(kind, d, design, prior, config.rho)?;
    Ok(solve_dual(&problem, &config.solver)?)
}

/// Runs the whole estimator on `data`.
pub fn fit(data: &Dataset, config: &MediationConfig) -> Result<MediationFit, MediationError> {
    if config.basis_dim == Some(0) || config.mediator_basis_dim == Some(0) {
        return Err(MediationError::Config("basis dimensions must be >= 1".into()));
    }
    let scaling = fit_scaling(data);
    let d = scaling.apply(data);
    let joint = d.joint_mediators();
    let r1 = d.x().ncols();
    let (k_default, l_default) = basis::default_dims(d.n(), r1, joint.ncols());
    let k_req = config.basis_dim.unwrap_or(k_default);
    let l_req = config
        .mediator_basis_dim
        .unwrap_or_else(|| if config.basis_dim.is_some() {
            basis::make_basis_spec(r1 + joint.ncols(), k_req, &[])
                .map(|s| s.target_dim())
                .unwrap_or(k_req)
        } else {
            l_default
        });

    let u_spec = basis::spec_for_data(d.x(), k_req)?;
    let u = basis::eval_basis(&u_spec, d.x())?;
    let xm = dataset::hstack(d.x(), &joint);
    let v_spec = basis::spec_for_data(&xm, l_req)?;
    let v = basis::eval_basis(&v_spec, &xm)?;
    let v_prior = match (d.w(), config.multimediator) {
        (Some(w), true) => {
            let xw = dataset::hstack(d.x(), w);
            let spec = basis::spec_for_data(&xw, l_req)?;
            Some(basis::eval_basis(&spec, &xw)?)
        }
        _ => None,
    };

    let p = solve(DualKind::FitP, &d, &u, None, config)?;
    let q = solve(DualKind::FitQ, &d, &u, None, config)?;
    let r = solve(DualKind::FitR, &d, &v, Some(&q), config)?;
    let w = solve(DualKind::FitW, &d, &v, Some(&p), config)?;
    let r_tilde = if config.ndeu {
        Some(solve(DualKind::FitRTilde, &d, &v, None, config)?)
    } else {
        None
    };
    let r_prior = match &v_prior {
        Some(basis) => Some(solve(DualKind::FitR, &d, basis, Some(&q), config)?),
        None => None,
    };

    let mut estimates = EstimandSet::from_means(
        estimate_delta(true, &d, &p)?,
        estimate_delta(false, &d, &q)?,
        estimate_theta0(&d, &r)?,
        estimate_theta1(&d, &w)?,
    );
    if let Some(rt) = &r_tilde {
        estimates.ndeu = Some(estimate_ndeu(&d, rt)?.ndeu);
    }
    if let Some(rp) = &r_prior {
        estimates.multimediator = Some(estimate_multimediator(
            &d,
            &MultiMediatorFits {
                p: &p,
                q: &q,
                r_w: rp,
                r_wm: &r,
            },
        )?);
    }

    let dims = DimsReport {
        k_requested: k_req,
        l_requested: l_req,
        k: u.dim(),
        l: v.dim(),
        l_prior: v_prior.as_ref().map(|b| b.dim()),
        defaulted: config.basis_dim.is_none() && config.mediator_basis_dim.is_none(),
    };
    Ok(MediationFit {
        config: config.clone(),
        scaling,
        scaled: d,
        dims,
        bases: Bases { u, v, v_prior },
        fits: Fits {
            p,
            q,
            r,
            w,
            r_tilde,
            r_prior,
        },
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn small() -> Dataset {
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| (i % 7) as f64);
        let m = DMatrix::from_fn(n, 1, |i, _| ((i * 3) % 5) as f64);
        let treated: Vec<bool> = (0..n).map(|i| (i * 11) % 3 != 0).collect();
        let y = DVector::from_fn(n, |i, _| 1.0 + 0.3 * x[(i, 0)] + if treated[i] { 1.0 } else { 0.0 } + 0.2 * m[(i, 0)]);
        Dataset::new(treated, y, x, m, None).unwrap()
    }

    #[test]
    fn contrasts_telescope() {
        let e = EstimandSet::from_means(1.3, 0.2, 0.9, 0.55);
        assert!((e.nie + e.nde - e.ate).abs() < 1e-15);
        assert!((e.pie - (e.theta1 - e.delta0)).abs() == 0.0);
    }

    #[test]
    fn constant_outcome_is_recovered_everywhere() {
        let d = small();
        let d = d.with_outcome(DVector::from_element(d.n(), 2.5)).unwrap();
        let cfg = MediationConfig {
            basis_dim: Some(3),
            mediator_basis_dim: Some(6),
            ..Default::default()
        };
        let f = fit(&d, &cfg).unwrap();
        for v in [f.estimates.delta1, f.estimates.delta0, f.estimates.theta0, f.estimates.theta1] {
            assert!((v - 2.5).abs() < 1e-8, "{v}");
        }
        assert!(f.estimates.ndeu.unwrap().abs() < 1e-8);
    }

    #[test]
    fn wrong_weights_are_rejected() {
        let d = small();
        let f = fit(&d, &MediationConfig { basis_dim: Some(2), ..Default::default() }).unwrap();
        assert!(matches!(
            estimate_theta0(&f.scaled, &f.fits.p),
            Err(MediationError::WrongWeights { .. })
        ));
        let mut unconverged = f.fits.r.clone();
        unconverged.converged = false;
        assert!(matches!(
            estimate_theta0(&f.scaled, &unconverged),
            Err(MediationError::NotConverged(DualKind::FitR))
        ));
    }

    #[test]
    fn multimediator_needs_prior_mediator() {
        let d = small();
        let f = fit(&d, &MediationConfig { basis_dim: Some(2), ..Default::default() }).unwrap();
        let fits = MultiMediatorFits {
            p: &f.fits.p,
            q: &f.fits.q,
            r_w: &f.fits.r,
            r_wm: &f.fits.r,
        };
        assert!(matches!(
            estimate_multimediator(&f.scaled, &fits),
            Err(MediationError::MissingPriorMediator)
        ));
    }

    #[test]
    fn intercept_only_delta_is_arm_mean() {
        let d = small();
        let f = fit(
            &d,
            &MediationConfig {
                basis_dim: Some(1),
                mediator_basis_dim: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let (s, c) = d
            .treated()
            .iter()
            .zip(d.y().iter())
            .filter(|(&t, _)| t)
            .fold((0.0, 0.0), |(s, c), (_, &y)| (s + y, c + 1.0));
        assert!((f.estimates.delta1 - s / c).abs() < 1e-12);
    }
}
