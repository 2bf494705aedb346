//! Plug-in sandwich variance for the weighting estimators.
//!
//! The estimators solve a stacked system of sample moment equations: the
//! first-order conditions of each calibration program followed by one scalar
//! equation per weighted mean. For `π = (δ₁, δ₀, θ₀)` the stack is
//! `g = (g₁ᵀ, g₂ᵀ, g₃ᵀ, g₄, g₅, g₆)ᵀ` with
//!
//! ```text
//! g₁ = T ρ'(φᵀu) u − u            g₄ = T ρ'(φᵀu) Y − δ₁
//! g₂ = (1−T) ρ'(λᵀu) u − u        g₅ = (1−T) ρ'(λᵀu) Y − δ₀
//! g₃ = T ρ'(βᵀv) v − (1−T) ρ'(λᵀu) v
//!                                 g₆ = T ρ'(βᵀv) Y − θ₀
//! ```
//!
//! and `V̂ = L̂ P̂ L̂ᵀ`, where `P̂` is the sample second moment of `g` and `L̂`
//! holds the last three rows of the inverted Jacobian. [`StackedSystem`]
//! generalizes the construction to the remaining estimands (θ₁, PIE, NDEU and
//! the path-specific terms) by inverting the full mean Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::calib::{CalibrationResult, ConcaveGenerator, RhoFamily};
use crate::linalg::{condition_number, min_eigenvalue, spd_solve};
use crate::mediation::MediationFit;

#[derive(Debug, Error, PartialEq)]
pub enum VarianceError {
    #[error("moment matrix {block} is singular (condition number {condition:.3e})")]
    SingularMoment { block: String, condition: f64 },
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("invalid variance input: {0}")]
    Invalid(String),
}

/// Contrasts of `π = (δ₁, δ₀, θ₀)`.
pub const K_THETA0: [f64; 3] = [0.0, 0.0, 1.0];
pub const K_NIE: [f64; 3] = [1.0, 0.0, -1.0];
pub const K_NDE: [f64; 3] = [0.0, -1.0, 1.0];
pub const K_ATE: [f64; 3] = [1.0, -1.0, 0.0];

/// Per-observation stacked moments evaluated at the fitted parameters.
#[derive(Debug, Clone)]
pub struct MomentStack {
    /// `n × (2K + L + 3)`; row `i` is `g(T_i, X_i, M_i, Y_i; τ̂)`.
    pub values: DMatrix<f64>,
    /// Basis dimensions `(K, K, L)` of the three calibration blocks.
    pub block_dims: [usize; 3],
    /// `π̂ = (δ̂₁, δ̂₀, θ̂₀)`.
    pub pi: [f64; 3],
}

impl MomentStack {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Column means; zero up to solver tolerance at the fitted parameters.
    pub fn mean(&self) -> DVector<f64> {
        self.values.row_mean().transpose()
    }

    /// `P̂ = (1/N) Σ g gᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        self.values.tr_mul(&self.values) / self.n() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCondition {
    pub block: &'static str,
    pub condition: f64,
    pub ridged: bool,
}

/// `L̂`, a `3 × (2K + L + 3)` matrix.
#[derive(Debug, Clone)]
pub struct Lhat {
    pub matrix: DMatrix<f64>,
    pub conditions: Vec<MomentCondition>,
}

fn arm(treated: bool, t: bool) -> bool {
    t == treated
}

fn linear_predictors(design: &DMatrix<f64>, coef: &DVector<f64>) -> DVector<f64> {
    design * coef
}

/// Evaluates the six moment blocks at the fitted parameters of `fit`.
pub fn assemble_moments(fit: &MediationFit) -> MomentStack {
    let d = &fit.scaled;
    let rho = fit.config.rho;
    let u = &fit.bases.u.values;
    let v = &fit.bases.v.values;
    let (k, l) = (u.ncols(), v.ncols());
    let e = &fit.estimates;
    let pi = [e.delta1, e.delta0, e.theta0];
    let sp = linear_predictors(u, &fit.fits.p.coefficients);
    let sq = linear_predictors(u, &fit.fits.q.coefficients);
    let sr = linear_predictors(v, &fit.fits.r.coefficients);

    let n = d.n();
    let mut g = DMatrix::zeros(n, 2 * k + l + 3);
    for i in 0..n {
        let t = d.treated()[i];
        let y = d.y()[i];
        let dp = if t { rho.deriv1(sp[i]) } else { 0.0 };
        let dq = if t { 0.0 } else { rho.deriv1(sq[i]) };
        let dr = if t { rho.deriv1(sr[i]) } else { 0.0 };
        for j in 0..k {
            g[(i, j)] = dp * u[(i, j)] - u[(i, j)];
            g[(i, k + j)] = dq * u[(i, j)] - u[(i, j)];
        }
        for j in 0..l {
            g[(i, 2 * k + j)] = dr * v[(i, j)] - dq * v[(i, j)];
        }
        let o = 2 * k + l;
        g[(i, o)] = dp * y - pi[0];
        g[(i, o + 1)] = dq * y - pi[1];
        g[(i, o + 2)] = dr * y - pi[2];
    }
    MomentStack {
        values: g,
        block_dims: [k, k, l],
        pi,
    }
}

/// `(1/N) Σ_arm ρ''(s_i) a_i b_iᵀ`.
fn curvature_cross(
    rho: RhoFamily,
    treated: &[bool],
    on_treated: bool,
    s: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = treated.len();
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for i in (0..n).filter(|&i| arm(on_treated, treated[i])) {
        let c = rho.deriv2(s[i]);
        out.ger(c, &a.row(i).transpose(), &b.row(i).transpose(), 1.0);
    }
    out / n as f64
}

/// `(1/N) Σ_arm ρ''(s_i) Y_i b_i`.
fn curvature_outcome(
    rho: RhoFamily,
    treated: &[bool],
    on_treated: bool,
    s: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
) -> DVector<f64> {
    let n = treated.len();
    let mut out = DVector::zeros(b.ncols());
    for i in (0..n).filter(|&i| arm(on_treated, treated[i])) {
        out.axpy(rho.deriv2(s[i]) * y[i], &b.row(i).transpose(), 1.0);
    }
    out / n as f64
}

/// Solves `A x = rhs` for the negative definite curvature matrix `A`.
fn solve_negative_definite(
    block: &'static str,
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    conditions: &mut Vec<MomentCondition>,
) -> Result<DVector<f64>, VarianceError> {
    let neg = -a;
    let rhs_m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    match spd_solve(&neg, &rhs_m) {
        Some(s) => {
            conditions.push(MomentCondition {
                block,
                condition: s.condition,
                ridged: s.ridged,
            });
            Ok(-s.solution.column(0).into_owned())
        }
        None => Err(VarianceError::SingularMoment {
            block: block.to_string(),
            condition: condition_number(&neg),
        }),
    }
}

/// Builds `L̂` from the sample moment matrices.
pub fn assemble_lhat(fit: &MediationFit) -> Result<Lhat, VarianceError> {
    let d = &fit.scaled;
    let rho = fit.config.rho;
    let t = d.treated();
    let y = d.y();
    let u = &fit.bases.u.values;
    let v = &fit.bases.v.values;
    let (k, l) = (u.ncols(), v.ncols());
    let sp = linear_predictors(u, &fit.fits.p.coefficients);
    let sq = linear_predictors(u, &fit.fits.q.coefficients);
    let sr = linear_predictors(v, &fit.fits.r.coefficients);

    let a11 = curvature_cross(rho, t, true, &sp, u, u);
    let a22 = curvature_cross(rho, t, false, &sq, u, u);
    let a33 = curvature_cross(rho, t, true, &sr, v, v);
    let b_vu = curvature_cross(rho, t, false, &sq, v, u);
    let c11 = curvature_outcome(rho, t, true, &sp, y, u);
    let c22 = curvature_outcome(rho, t, false, &sq, y, u);
    let c33 = curvature_outcome(rho, t, true, &sr, y, v);

    let mut conditions = Vec::new();
    // Each row is (A⁻¹ cᵀ)ᵀ since the A blocks are symmetric.
    let l11 = solve_negative_definite("A11", &a11, &c11, &mut conditions)?;
    let l22 = solve_negative_definite("A22", &a22, &c22, &mut conditions)?;
    let l33 = solve_negative_definite("A33", &a33, &c33, &mut conditions)?;
    let middle = b_vu.tr_mul(&l33);
    let mut scratch = Vec::new();
    let l32 = solve_negative_definite("A22", &a22, &middle, &mut scratch)?;

    let dim = 2 * k + l + 3;
    let mut m = DMatrix::zeros(3, dim);
    for j in 0..k {
        m[(0, j)] = l11[j];
        m[(1, k + j)] = l22[j];
        m[(2, k + j)] = l32[j];
    }
    for j in 0..l {
        m[(2, 2 * k + j)] = l33[j];
    }
    for r in 0..3 {
        m[(r, 2 * k + l + r)] = -1.0;
    }
    Ok(Lhat {
        matrix: m,
        conditions,
    })
}

/// One row of a variance report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub name: String,
    pub estimate: f64,
    /// Asymptotic variance of `√N (estimate − truth)`.
    pub variance: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl EstimateRow {
    fn new(name: &str, estimate: f64, variance: f64, n: usize, z: f64) -> Self {
        let std_error = (variance.max(0.0) / n as f64).sqrt();
        Self {
            name: name.to_string(),
            estimate,
            variance,
            std_error,
            ci_lower: estimate - z * std_error,
            ci_upper: estimate + z * std_error,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub n: usize,
    pub level: f64,
    /// `V̂` for `π = (δ₁, δ₀, θ₀)`, symmetrized.
    pub vhat: DMatrix<f64>,
    /// θ₀, NIE, NDE and ATE, in that order.
    pub rows: Vec<EstimateRow>,
    pub min_eigenvalue: f64,
    /// `λ_min(V̂) ≥ −1e−8 · tr(V̂)`.
    pub positive_semidefinite: bool,
    pub conditions: Vec<MomentCondition>,
}

impl VarianceReport {
    pub fn row(&self, name: &str) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `k V̂ kᵀ` for a contrast of `π`.
    pub fn contrast_variance(&self, k: &[f64; 3]) -> f64 {
        quadratic_form(&self.vhat, k)
    }
}

fn quadratic_form(m: &DMatrix<f64>, k: &[f64]) -> f64 {
    let k = DVector::from_column_slice(k);
    (k.transpose() * m * &k)[(0, 0)]
}

/// Two-sided standard normal quantile for `level`.
pub fn normal_quantile(level: f64) -> Result<f64, VarianceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(VarianceError::InvalidLevel(level));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// `V̂ = L̂ P̂ L̂ᵀ` and the θ₀, NIE, NDE, ATE rows.
pub fn compute_vhat(moments: &MomentStack, lhat: &Lhat, level: f64) -> Result<VarianceReport, VarianceError> {
    if lhat.matrix.ncols() != moments.dim() || lhat.matrix.nrows() != 3 {
        return Err(VarianceError::Invalid(format!(
            "L is {}x{}, moment stack has dimension {}",
            lhat.matrix.nrows(),
            lhat.matrix.ncols(),
            moments.dim()
        )));
    }
    let z = normal_quantile(level)?;
    let p = moments.second_moment();
    let v = &lhat.matrix * p * lhat.matrix.transpose();
    let vhat = (&v + v.transpose()) * 0.5;
    let n = moments.n();
    let pi = moments.pi;
    let est = |k: &[f64; 3]| k[0] * pi[0] + k[1] * pi[1] + k[2] * pi[2];
    let rows = [("theta0", K_THETA0), ("nie", K_NIE), ("nde", K_NDE), ("ate", K_ATE)]
        .iter()
        .map(|(name, k)| EstimateRow::new(name, est(k), quadratic_form(&vhat, k), n, z))
        .collect();
    let min_eig = min_eigenvalue(&vhat);
    Ok(VarianceReport {
        n,
        level,
        positive_semidefinite: min_eig >= -1e-8 * vhat.trace().abs(),
        min_eigenvalue: min_eig,
        vhat,
        rows,
        conditions: lhat.conditions.clone(),
    })
}

/// What a calibration block balances toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// `(1/N) Σ b_i` over the whole sample.
    DesignMean,
    /// `Σ ŵ_i b_i` with the weights of an earlier block.
    Prior(usize),
    /// Control-arm mean of `b`, through the treated-share parameter at this
    /// scalar index.
    ControlMean { share: usize },
}

#[derive(Debug, Clone)]
pub struct CalibBlock<'a> {
    pub name: &'static str,
    pub design: &'a DMatrix<f64>,
    pub on_treated: bool,
    pub coefficients: &'a DVector<f64>,
    pub target: Target,
}

impl<'a> CalibBlock<'a> {
    pub fn from_result(name: &'static str, design: &'a DMatrix<f64>, fit: &'a CalibrationResult, target: Target) -> Self {
        Self {
            name,
            design,
            on_treated: fit.kind.calibrates_treated(),
            coefficients: &fit.coefficients,
            target,
        }
    }
}

/// Scalar estimating equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarEquation {
    /// `1{arm} ρ'(cᵀb) Y − θ` for calibration block `block`.
    WeightedOutcome { block: usize },
    /// `T − s`.
    TreatedShare,
    /// `(1 − T)(Y − μ)`.
    ControlOutcomeMean,
}

#[derive(Debug, Clone)]
pub struct ScalarParam {
    pub name: &'static str,
    pub value: f64,
    pub equation: ScalarEquation,
}

/// A stacked system of calibration blocks and scalar equations whose
/// sandwich covariance gives the asymptotic covariance of the scalars.
#[derive(Debug, Clone)]
pub struct StackedSystem<'a> {
    pub rho: RhoFamily,
    pub treated: &'a [bool],
    pub y: &'a DVector<f64>,
    pub blocks: Vec<CalibBlock<'a>>,
    pub scalars: Vec<ScalarParam>,
}

impl<'a> StackedSystem<'a> {
    fn offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut o = 0;
        for b in &self.blocks {
            offs.push(o);
            o += b.design.ncols();
        }
        (offs, o)
    }

    pub fn dim(&self) -> usize {
        self.offsets().1 + self.scalars.len()
    }

    fn share(&self, idx: usize) -> Result<f64, VarianceError> {
        match self.scalars.get(idx) {
            Some(s) if s.equation == ScalarEquation::TreatedShare => Ok(s.value),
            _ => Err(VarianceError::Invalid(format!("scalar {idx} is not a treated share"))),
        }
    }

    fn validate(&self) -> Result<(), VarianceError> {
        let n = self.treated.len();
        if self.y.len() != n {
            return Err(VarianceError::Invalid("outcome length mismatch".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.design.nrows() != n || b.coefficients.len() != b.design.ncols() {
                return Err(VarianceError::Invalid(format!("block {} has inconsistent shapes", b.name)));
            }
            match b.target {
                Target::Prior(j) if j >= k => {
                    return Err(VarianceError::Invalid(format!("block {} must follow its prior", b.name)))
                }
                Target::ControlMean { share } => {
                    self.share(share)?;
                }
                _ => {}
            }
        }
        for s in &self.scalars {
            if let ScalarEquation::WeightedOutcome { block } = s.equation {
                if block >= self.blocks.len() {
                    return Err(VarianceError::Invalid(format!("scalar {} refers to a missing block", s.name)));
                }
            }
        }
        Ok(())
    }

    /// `ρ'(cᵀb_i)` on the block's arm, zero elsewhere, plus the predictors.
    fn block_derivs(&self) -> Vec<(DVector<f64>, DVector<f64>)> {
        self.blocks
            .iter()
            .map(|b| {
                let s = b.design * b.coefficients;
                let d1 = DVector::from_fn(s.len(), |i, _| {
                    if arm(b.on_treated, self.treated[i]) {
                        self.rho.deriv1(s[i])
                    } else {
                        0.0
                    }
                });
                (s, d1)
            })
            .collect()
    }

    /// Per-observation moments, `n × dim`.
    pub fn moments(&self) -> Result<DMatrix<f64>, VarianceError> {
        self.validate()?;
        let n = self.treated.len();
        let (offs, o_scalar) = self.offsets();
        let derivs = self.block_derivs();
        let mut g = DMatrix::zeros(n, self.dim());
        for (k, b) in self.blocks.iter().enumerate() {
            let d1 = &derivs[k].1;
            let share = match b.target {
                Target::ControlMean { share } => self.share(share)?,
                _ => 0.0,
            };
            for i in 0..n {
                let target_scale = match b.target {
                    Target::DesignMean => 1.0,
                    Target::Prior(j) => derivs[j].1[i],
                    Target::ControlMean { .. } => {
                        if self.treated[i] {
                            0.0
                        } else {
                            1.0 / (1.0 - share)
                        }
                    }
                };
                for j in 0..b.design.ncols() {
                    g[(i, offs[k] + j)] = (d1[i] - target_scale) * b.design[(i, j)];
                }
            }
        }
        for (s, p) in self.scalars.iter().enumerate() {
            let col = o_scalar + s;
            for i in 0..n {
                let t = if self.treated[i] { 1.0 } else { 0.0 };
                g[(i, col)] = match p.equation {
                    ScalarEquation::WeightedOutcome { block } => derivs[block].1[i] * self.y[i] - p.value,
                    ScalarEquation::TreatedShare => t - p.value,
                    ScalarEquation::ControlOutcomeMean => (1.0 - t) * (self.y[i] - p.value),
                };
            }
        }
        Ok(g)
    }

    /// Mean Jacobian of the moments with respect to all parameters.
    pub fn jacobian(&self) -> Result<DMatrix<f64>, VarianceError> {
        self.validate()?;
        let n = self.treated.len();
        let nf = n as f64;
        let (offs, o_scalar) = self.offsets();
        let derivs = self.block_derivs();
        let dim = self.dim();
        let mut jac = DMatrix::zeros(dim, dim);
        for (k, b) in self.blocks.iter().enumerate() {
            let dk = b.design.ncols();
            let own = curvature_cross(self.rho, self.treated, b.on_treated, &derivs[k].0, b.design, b.design);
            jac.view_mut((offs[k], offs[k]), (dk, dk)).copy_from(&own);
            match b.target {
                Target::DesignMean => {}
                Target::Prior(j) => {
                    let pj = &self.blocks[j];
                    let cross = curvature_cross(self.rho, self.treated, pj.on_treated, &derivs[j].0, b.design, pj.design);
                    jac.view_mut((offs[k], offs[j]), (dk, pj.design.ncols())).copy_from(&(-cross));
                }
                Target::ControlMean { share } => {
                    let s = self.share(share)?;
                    let mut col = DVector::zeros(dk);
                    for i in (0..n).filter(|&i| !self.treated[i]) {
                        col += b.design.row(i).transpose();
                    }
                    col /= -nf * (1.0 - s) * (1.0 - s);
                    jac.view_mut((offs[k], o_scalar + share), (dk, 1)).copy_from(&col);
                }
            }
        }
        for (s, p) in self.scalars.iter().enumerate() {
            let row = o_scalar + s;
            match p.equation {
                ScalarEquation::WeightedOutcome { block } => {
                    let b = &self.blocks[block];
                    let c = curvature_outcome(self.rho, self.treated, b.on_treated, &derivs[block].0, self.y, b.design);
                    jac.view_mut((row, offs[block]), (1, c.len())).copy_from(&c.transpose());
                    jac[(row, row)] = -1.0;
                }
                ScalarEquation::TreatedShare => jac[(row, row)] = -1.0,
                ScalarEquation::ControlOutcomeMean => {
                    let controls = self.treated.iter().filter(|&&t| !t).count();
                    jac[(row, row)] = -(controls as f64) / nf;
                }
            }
        }
        Ok(jac)
    }

    /// Asymptotic covariance of `√N` times the scalar estimates:
    /// rows of `G⁻¹ P G⁻ᵀ` for the scalar parameters.
    pub fn scalar_covariance(&self) -> Result<DMatrix<f64>, VarianceError> {
        let g = self.moments()?;
        let n = g.nrows() as f64;
        let p = g.tr_mul(&g) / n;
        let jac = self.jacobian()?;
        let inv = jac.clone().lu().try_inverse().ok_or_else(|| VarianceError::SingularMoment {
            block: "stacked Jacobian".into(),
            condition: jac.clone().svd(false, false).singular_values.iter().fold(0.0f64, |a, &b| a.max(b))
                / jac.svd(false, false).singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        })?;
        let o = self.offsets().1;
        let rows = inv.rows(o, self.scalars.len()).into_owned();
        let cov = &rows * p * rows.transpose();
        Ok((&cov + cov.transpose()) * 0.5)
    }
}

/// Scalar contrasts reported by [`extended_rows`], as `(name, [(scalar, coef)])`.
type Contrast = (&'static str, Vec<(&'static str, f64)>);

/// Builds the stacked system covering every estimand `fit` produced.
pub fn full_system(fit: &MediationFit) -> StackedSystem<'_> {
    let d = &fit.scaled;
    let u = &fit.bases.u.values;
    let v = &fit.bases.v.values;
    let f = &fit.fits;
    let e = &fit.estimates;
    let mut blocks = vec![
        CalibBlock::from_result("p", u, &f.p, Target::DesignMean),
        CalibBlock::from_result("q", u, &f.q, Target::DesignMean),
        CalibBlock::from_result("r", v, &f.r, Target::Prior(1)),
        CalibBlock::from_result("w", v, &f.w, Target::Prior(0)),
    ];
    let mut scalars = vec![
        ScalarParam { name: "delta1", value: e.delta1, equation: ScalarEquation::WeightedOutcome { block: 0 } },
        ScalarParam { name: "delta0", value: e.delta0, equation: ScalarEquation::WeightedOutcome { block: 1 } },
        ScalarParam { name: "theta0", value: e.theta0, equation: ScalarEquation::WeightedOutcome { block: 2 } },
        ScalarParam { name: "theta1", value: e.theta1, equation: ScalarEquation::WeightedOutcome { block: 3 } },
    ];
    if let Some(rt) = &f.r_tilde {
        let share_idx = scalars.len();
        scalars.push(ScalarParam {
            name: "treated_share",
            value: d.treated_share(),
            equation: ScalarEquation::TreatedShare,
        });
        blocks.push(CalibBlock::from_result("r_tilde", v, rt, Target::ControlMean { share: share_idx }));
        let controls = d.n_control() as f64;
        let delta0_prime = d
            .treated()
            .iter()
            .zip(d.y().iter())
            .filter(|(&t, _)| !t)
            .map(|(_, &y)| y)
            .sum::<f64>()
            / controls;
        scalars.push(ScalarParam {
            name: "theta1_prime",
            value: rt.weights.dot(d.y()),
            equation: ScalarEquation::WeightedOutcome { block: blocks.len() - 1 },
        });
        scalars.push(ScalarParam {
            name: "delta0_prime",
            value: delta0_prime,
            equation: ScalarEquation::ControlOutcomeMean,
        });
    }
    if let (Some(rp), Some(vp)) = (&f.r_prior, &fit.bases.v_prior) {
        blocks.push(CalibBlock::from_result("r_prior", &vp.values, rp, Target::Prior(1)));
        scalars.push(ScalarParam {
            name: "theta_w",
            value: rp.weights.dot(d.y()),
            equation: ScalarEquation::WeightedOutcome { block: blocks.len() - 1 },
        });
    }
    StackedSystem {
        rho: fit.config.rho,
        treated: d.treated(),
        y: d.y(),
        blocks,
        scalars,
    }
}

fn contrasts(has_ndeu: bool, has_paths: bool) -> Vec<Contrast> {
    let mut c: Vec<Contrast> = vec![
        ("delta1", vec![("delta1", 1.0)]),
        ("delta0", vec![("delta0", 1.0)]),
        ("theta0", vec![("theta0", 1.0)]),
        ("theta1", vec![("theta1", 1.0)]),
        ("nie", vec![("delta1", 1.0), ("theta0", -1.0)]),
        ("nde", vec![("theta0", 1.0), ("delta0", -1.0)]),
        ("pie", vec![("theta1", 1.0), ("delta0", -1.0)]),
        ("ate", vec![("delta1", 1.0), ("delta0", -1.0)]),
    ];
    if has_ndeu {
        c.push(("ndeu", vec![("theta1_prime", 1.0), ("delta0_prime", -1.0)]));
    }
    if has_paths {
        c.push(("theta_w", vec![("theta_w", 1.0)]));
        c.push(("path_w", vec![("delta1", 1.0), ("theta_w", -1.0)]));
        c.push(("path_m", vec![("theta_w", 1.0), ("theta0", -1.0)]));
        c.push(("direct", vec![("theta0", 1.0), ("delta0", -1.0)]));
    }
    c
}

/// Estimate, standard error and CI for every estimand in `fit`, from the
/// full stacked system.
pub fn extended_rows(fit: &MediationFit, level: f64) -> Result<Vec<EstimateRow>, VarianceError> {
    let z = normal_quantile(level)?;
    let sys = full_system(fit);
    let cov = sys.scalar_covariance()?;
    let names: Vec<&str> = sys.scalars.iter().map(|s| s.name).collect();
    let idx = |name: &str| names.iter().position(|&s| s == name);
    let n = fit.scaled.n();
    let has_ndeu = idx("theta1_prime").is_some();
    let has_paths = idx("theta_w").is_some();
    let mut rows = Vec::new();
    for (name, terms) in contrasts(has_ndeu, has_paths) {
        let mut k = vec![0.0; names.len()];
        let mut est = 0.0;
        for (s, c) in terms {
            let i = idx(s).expect("scalar present");
            k[i] += c;
            est += c * sys.scalars[i].value;
        }
        rows.push(EstimateRow::new(name, est, quadratic_form(&cov, &k), n, z));
    }
    Ok(rows)
}

/// The `(δ₁, δ₀, θ₀)` sandwich report plus the extended rows.
#[derive(Debug, Clone)]
pub struct MediationVariance {
    pub vhat: VarianceReport,
    pub rows: Vec<EstimateRow>,
}

impl MediationVariance {
    pub fn row(&self, name: &str) -> Option<&EstimateRow> {
        self.vhat.row(name).or_else(|| self.rows.iter().find(|r| r.name == name))
    }
}

/// Runs both variance constructions on `fit`.
pub fn analyze(fit: &MediationFit, level: f64) -> Result<MediationVariance, VarianceError> {
    let moments = assemble_moments(fit);
    let lhat = assemble_lhat(fit)?;
    let vhat = compute_vhat(&moments, &lhat, level)?;
    let rows = extended_rows(fit, level)?;
    Ok(MediationVariance { vhat, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::mediation::{fit, MediationConfig};

    fn data(n: usize, y_const: Option<f64>) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| ((i * 7) % 11) as f64 / 10.0);
        let m = DMatrix::from_fn(n, 1, |i, _| ((i * 5) % 13) as f64 / 6.0 + x[(i, 0)]);
        let treated: Vec<bool> = (0..n).map(|i| (i * 37 + 11) % 17 < 8).collect();
        let y = DVector::from_fn(n, |i, _| match y_const {
            Some(c) => c,
            None => {
                0.5 + x[(i, 0)] + 0.7 * m[(i, 0)] + if treated[i] { 1.0 } else { 0.0 } + ((i * 13) % 7) as f64 * 0.1
            }
        });
        Dataset::new(treated, y, x, m, None).unwrap()
    }

    fn cfg(k: usize, l: usize, rho: RhoFamily) -> MediationConfig {
        MediationConfig {
            rho,
            basis_dim: Some(k),
            mediator_basis_dim: Some(l),
            ..Default::default()
        }
    }

    #[test]
    fn moments_average_to_zero() {
        let f = fit(&data(300, None), &cfg(3, 6, RhoFamily::ExponentialTilting)).unwrap();
        let m = assemble_moments(&f);
        assert_eq!(m.dim(), 3 + 3 + 6 + 3);
        assert!(m.mean().amax() < 1e-8, "{}", m.mean().amax());
    }

    #[test]
    fn zero_outcome_blocks_equal_minus_estimate() {
        let f = fit(&data(120, Some(0.0)), &cfg(2, 3, RhoFamily::ExponentialTilting)).unwrap();
        let m = assemble_moments(&f);
        let o = m.dim() - 3;
        for i in 0..m.n() {
            for c in 0..3 {
                assert!((m.values[(i, o + c)] + m.pi[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_basis_l11_is_ratio() {
        let f = fit(&data(200, None), &cfg(1, 1, RhoFamily::EmpiricalLikelihood)).unwrap();
        let l = assemble_lhat(&f).unwrap();
        let d = &f.scaled;
        let rho = RhoFamily::EmpiricalLikelihood;
        let c = f.fits.p.coefficients[0] * f.bases.u.values[(0, 0)];
        let (num, den) = (0..d.n()).filter(|&i| d.treated()[i]).fold((0.0, 0.0), |(a, b), i| {
            (a + rho.deriv2(c) * d.y()[i], b + rho.deriv2(c))
        });
        assert!((l.matrix[(0, 0)] * f.bases.u.values[(0, 0)] - num / den).abs() < 1e-10);
    }

    #[test]
    fn cue_l11_is_treated_least_squares() {
        let f = fit(&data(250, None), &cfg(3, 4, RhoFamily::ContinuousUpdating)).unwrap();
        let l = assemble_lhat(&f).unwrap();
        let d = &f.scaled;
        let rows: Vec<usize> = (0..d.n()).filter(|&i| d.treated()[i]).collect();
        let u = &f.bases.u.values;
        let a = DMatrix::from_fn(rows.len(), 3, |r, c| u[(rows[r], c)]);
        let b = DVector::from_fn(rows.len(), |r, _| d.y()[rows[r]]);
        let ols = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        for j in 0..3 {
            assert!((l.matrix[(0, j)] - ols[j]).abs() < 1e-9, "{} vs {}", l.matrix[(0, j)], ols[j]);
        }
    }

    #[test]
    fn constant_outcome_has_zero_variance() {
        let f = fit(&data(200, Some(4.0)), &cfg(1, 1, RhoFamily::ExponentialTilting)).unwrap();
        let r = analyze(&f, 0.95).unwrap();
        assert!(r.vhat.contrast_variance(&K_THETA0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_form_is_bilinear() {
        let f = fit(&data(300, None), &cfg(3, 6, RhoFamily::ExponentialTilting)).unwrap();
        let r = analyze(&f, 0.95).unwrap();
        let v = &r.vhat.vhat;
        let cross = quadratic_form(v, &[0.5, 0.5, 0.0]) * 0.0
            + (DVector::from_column_slice(&K_NIE).transpose() * v * DVector::from_column_slice(&K_NDE))[(0, 0)];
        let lhs = r.vhat.contrast_variance(&K_NIE) + r.vhat.contrast_variance(&K_NDE) + 2.0 * cross;
        assert!((lhs - r.vhat.contrast_variance(&K_ATE)).abs() < 1e-10 * (1.0 + lhs.abs()));
        assert!(r.vhat.positive_semidefinite);
        assert!(((v - v.transpose()).amax()) < 1e-10);
    }

    #[test]
    fn stacked_engine_matches_lhat_construction() {
        for rho in RhoFamily::ALL {
            let f = fit(&data(400, None), &cfg(3, 6, rho)).unwrap();
            let r = analyze(&f, 0.95).unwrap();
            for name in ["theta0", "nie", "nde", "ate"] {
                let a = r.vhat.row(name).unwrap().variance;
                let b = r.rows.iter().find(|x| x.name == name).unwrap().variance;
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{rho} {name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ci_width_uses_normal_quantile() {
        let f = fit(&data(300, None), &cfg(2, 4, RhoFamily::ExponentialTilting)).unwrap();
        let r = analyze(&f, 0.9).unwrap();
        let row = r.vhat.row("nie").unwrap();
        let z = 1.6448536269514722;
        let half = z * (row.variance / r.vhat.n as f64).sqrt();
        assert!(((row.ci_upper - row.ci_lower) / 2.0 - half).abs() < 1e-12);
        assert!(matches!(normal_quantile(1.0), Err(VarianceError::InvalidLevel(_))));
    }
}
