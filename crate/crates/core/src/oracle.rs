//! Synthetic data-generating processes with exactly computable truths.
//!
//! [`DiscreteDGP`] has finite supports, so every estimand and every
//! efficient-influence second moment is a finite sum. [`LinearNormalDGP`] is
//! a continuous test bed with closed-form estimands.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::mediation::{EstimandSet, PathEffects};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid DGP: {0}")]
    Invalid(String),
    #[error("exact influence variances need a discrete DGP")]
    ContinuousUnsupported,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Generator for replication `rep` of a study seeded with `seed`; distinct
/// replications use distinct ChaCha streams.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// A finite DGP. Without a prior mediator the `w` axis of `f_m` and `mu` has
/// length one.
///
/// Tables are indexed `[t][x][w][m]`; `f_w` is `[t][x][w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDGP {
    /// Support points of `X`, each of the same dimension.
    pub x_support: Vec<Vec<f64>>,
    pub f_x: Vec<f64>,
    /// `f(T = 1 | x)`.
    pub propensity: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_support: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_w: Option<Vec<Vec<Vec<f64>>>>,
    pub m_support: Vec<f64>,
    pub f_m: Vec<Vec<Vec<Vec<f64>>>>,
    /// `E[Y | t, x, w, m]`.
    pub mu: Vec<Vec<Vec<Vec<f64>>>>,
    /// Standard deviation of the Gaussian outcome noise.
    pub noise_sd: f64,
}

fn check_distribution(name: &str, p: &[f64]) -> Result<(), OracleError> {
    if p.is_empty() {
        return Err(OracleError::Invalid(format!("{name} is empty")));
    }
    if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(OracleError::Invalid(format!("{name} has entries outside (0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(OracleError::Invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Draws weights uniform on `[1, 2]`, normalizes, clips into
/// `[0.05, 0.95]` and renormalizes.
fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..2.0)).collect();
    let s: f64 = raw.iter().sum();
    let clipped: Vec<f64> = raw.iter().map(|v| (v / s).clamp(0.05, 0.95)).collect();
    let s: f64 = clipped.iter().sum();
    clipped.iter().map(|v| v / s).collect()
}

/// Estimands as one vector, in [`Functionals::NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Functionals {
    pub delta1: f64,
    pub delta0: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub ndeu: f64,
    pub theta_w: f64,
}

/// Estimands whose influence variance can be requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Delta1,
    Delta0,
    Theta0,
    Theta1,
    Nie,
    Nde,
    Pie,
    Ate,
    Ndeu,
    ThetaW,
    PathW,
    PathM,
    Direct,
}

impl Estimand {
    pub const SINGLE: [Estimand; 9] = [
        Estimand::Delta1,
        Estimand::Delta0,
        Estimand::Theta0,
        Estimand::Theta1,
        Estimand::Nie,
        Estimand::Nde,
        Estimand::Pie,
        Estimand::Ate,
        Estimand::Ndeu,
    ];
    pub const PATHS: [Estimand; 4] = [Estimand::ThetaW, Estimand::PathW, Estimand::PathM, Estimand::Direct];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Delta1 => "delta1",
            Estimand::Delta0 => "delta0",
            Estimand::Theta0 => "theta0",
            Estimand::Theta1 => "theta1",
            Estimand::Nie => "nie",
            Estimand::Nde => "nde",
            Estimand::Pie => "pie",
            Estimand::Ate => "ate",
            Estimand::Ndeu => "ndeu",
            Estimand::ThetaW => "theta_w",
            Estimand::PathW => "path_w",
            Estimand::PathM => "path_m",
            Estimand::Direct => "direct",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::SINGLE.iter().chain(&Self::PATHS).copied().find(|e| e.name() == s)
    }

    pub fn value(self, f: &Functionals) -> f64 {
        match self {
            Estimand::Delta1 => f.delta1,
            Estimand::Delta0 => f.delta0,
            Estimand::Theta0 => f.theta0,
            Estimand::Theta1 => f.theta1,
            Estimand::Nie => f.delta1 - f.theta0,
            Estimand::Nde | Estimand::Direct => f.theta0 - f.delta0,
            Estimand::Pie => f.theta1 - f.delta0,
            Estimand::Ate => f.delta1 - f.delta0,
            Estimand::Ndeu => f.ndeu,
            Estimand::ThetaW => f.theta_w,
            Estimand::PathW => f.delta1 - f.theta_w,
            Estimand::PathM => f.theta_w - f.theta0,
        }
    }

    /// Reads the matching field of an estimate set.
    pub fn of(self, e: &EstimandSet) -> Option<f64> {
        let paths = e.multimediator;
        match self {
            Estimand::Delta1 => Some(e.delta1),
            Estimand::Delta0 => Some(e.delta0),
            Estimand::Theta0 => Some(e.theta0),
            Estimand::Theta1 => Some(e.theta1),
            Estimand::Nie => Some(e.nie),
            Estimand::Nde => Some(e.nde),
            Estimand::Pie => Some(e.pie),
            Estimand::Ate => Some(e.ate),
            Estimand::Ndeu => e.ndeu,
            Estimand::ThetaW => paths.map(|p| p.theta_w),
            Estimand::PathW => paths.map(|p| p.path_w),
            Estimand::PathM => paths.map(|p| p.path_m),
            Estimand::Direct => paths.map(|p| p.direct),
        }
    }
}

/// Influence-function second moments `E[S²]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceVariances {
    pub entries: Vec<(Estimand, f64)>,
}

impl InfluenceVariances {
    pub fn get(&self, e: Estimand) -> Option<f64> {
        self.entries.iter().find(|(k, _)| *k == e).map(|(_, v)| *v)
    }
}

/// Probability tables in the shape used by the summation formulas.
#[derive(Debug, Clone)]
struct Tables {
    fx: Vec<f64>,
    e: Vec<f64>,
    fw: Vec<Vec<Vec<f64>>>,
    fm: Vec<Vec<Vec<Vec<f64>>>>,
    mu: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Tables {
    fn nx(&self) -> usize {
        self.fx.len()
    }
    fn nw(&self) -> usize {
        self.fw[0][0].len()
    }
    fn nm(&self) -> usize {
        self.fm[0][0][0].len()
    }
    fn ft(&self, t: usize, x: usize) -> f64 {
        if t == 1 {
            self.e[x]
        } else {
            1.0 - self.e[x]
        }
    }
    /// `f(w, m | t, x)`.
    fn fj(&self, t: usize, x: usize, w: usize, m: usize) -> f64 {
        self.fw[t][x][w] * self.fm[t][x][w][m]
    }

    /// `Σ_x f(x) Σ_{w,m} f(w|tw,x) f(m|tm,x,w) μ(ty,x,w,m)`, optionally
    /// reweighting `x` by `f(T = 0 | x)`.
    fn cross(&self, ty: usize, tw: usize, tm: usize, untreated: bool) -> f64 {
        let mut total = 0.0;
        let mut mass = 0.0;
        for x in 0..self.nx() {
            let wx = self.fx[x] * if untreated { self.ft(0, x) } else { 1.0 };
            mass += wx;
            let mut inner = 0.0;
            for w in 0..self.nw() {
                for m in 0..self.nm() {
                    inner += self.fw[tw][x][w] * self.fm[tm][x][w][m] * self.mu[ty][x][w][m];
                }
            }
            total += wx * inner;
        }
        total / mass
    }

    fn functionals(&self) -> Functionals {
        let delta1 = self.cross(1, 1, 1, false);
        let delta0 = self.cross(0, 0, 0, false);
        let theta1_prime = self.cross(1, 0, 0, true);
        let delta0_prime = self.cross(0, 0, 0, true);
        Functionals {
            delta1,
            delta0,
            theta0: self.cross(1, 0, 0, false),
            theta1: self.cross(0, 1, 1, false),
            ndeu: theta1_prime - delta0_prime,
            theta_w: self.cross(1, 0, 1, false),
        }
    }

    /// Cell probabilities `p[x][t][w][m]`, flattened.
    fn joint(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.nx() * 2 * self.nw() * self.nm());
        for x in 0..self.nx() {
            for t in 0..2 {
                for w in 0..self.nw() {
                    for m in 0..self.nm() {
                        p.push(self.fx[x] * self.ft(t, x) * self.fj(t, x, w, m));
                    }
                }
            }
        }
        p
    }

    /// Conditional tables implied by unnormalized cell masses.
    fn from_joint(p: &[f64], mu: &[Vec<Vec<Vec<f64>>>], nx: usize, nw: usize, nm: usize) -> Self {
        let at = |x: usize, t: usize, w: usize, m: usize| p[((x * 2 + t) * nw + w) * nm + m];
        let total: f64 = p.iter().sum();
        let mut fx = vec![0.0; nx];
        let mut e = vec![0.0; nx];
        let mut fw = vec![vec![vec![0.0; nw]; nx]; 2];
        let mut fm = vec![vec![vec![vec![0.0; nm]; nw]; nx]; 2];
        for x in 0..nx {
            let mut by_t = [0.0; 2];
            for t in 0..2 {
                for w in 0..nw {
                    let tw: f64 = (0..nm).map(|m| at(x, t, w, m)).sum();
                    fw[t][x][w] = tw;
                    for m in 0..nm {
                        fm[t][x][w][m] = at(x, t, w, m) / tw;
                    }
                    by_t[t] += tw;
                }
                for w in 0..nw {
                    fw[t][x][w] /= by_t[t];
                }
            }
            fx[x] = (by_t[0] + by_t[1]) / total;
            e[x] = by_t[1] / (by_t[0] + by_t[1]);
        }
        Tables {
            fx,
            e,
            fw,
            fm,
            mu: mu.to_vec(),
        }
    }
}

impl DiscreteDGP {
    pub fn validate(&self) -> Result<(), OracleError> {
        let nx = self.x_support.len();
        if nx == 0 {
            return Err(OracleError::Invalid("X support is empty".into()));
        }
        let r1 = self.x_support[0].len();
        if r1 == 0 || self.x_support.iter().any(|p| p.len() != r1 || p.iter().any(|v| !v.is_finite())) {
            return Err(OracleError::Invalid("X support points must share a positive dimension".into()));
        }
        if self.f_x.len() != nx || self.propensity.len() != nx {
            return Err(OracleError::Invalid("f_x and propensity need one entry per X point".into()));
        }
        check_distribution("f_x", &self.f_x)?;
        if self.propensity.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(OracleError::Invalid("propensity must lie strictly inside (0, 1)".into()));
        }
        let nw = match (&self.w_support, &self.f_w) {
            (None, None) => 1,
            (Some(ws), Some(fw)) => {
                if ws.is_empty() {
                    return Err(OracleError::Invalid("W support is empty".into()));
                }
                if fw.len() != 2 || fw.iter().any(|tx| tx.len() != nx) {
                    return Err(OracleError::Invalid("f_w must be indexed [t][x]".into()));
                }
                for (t, tx) in fw.iter().enumerate() {
                    for (x, p) in tx.iter().enumerate() {
                        if p.len() != ws.len() {
                            return Err(OracleError::Invalid("f_w rows must match the W support".into()));
                        }
                        check_distribution(&format!("f_w[{t}][{x}]"), p)?;
                    }
                }
                ws.len()
            }
            _ => return Err(OracleError::Invalid("w_support and f_w go together".into())),
        };
        let nm = self.m_support.len();
        if nm == 0 || self.m_support.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Invalid("M support must be non-empty and finite".into()));
        }
        for (name, table) in [("f_m", &self.f_m), ("mu", &self.mu)] {
            let ok = table.len() == 2
                && table.iter().all(|tx| {
                    tx.len() == nx && tx.iter().all(|xw| xw.len() == nw && xw.iter().all(|r| r.len() == nm))
                });
            if !ok {
                return Err(OracleError::Invalid(format!("{name} must have shape [2][{nx}][{nw}][{nm}]")));
            }
        }
        for t in 0..2 {
            for x in 0..nx {
                for w in 0..nw {
                    check_distribution(&format!("f_m[{t}][{x}][{w}]"), &self.f_m[t][x][w])?;
                    if self.mu[t][x][w].iter().any(|v| !v.is_finite()) {
                        return Err(OracleError::Invalid("mu must be finite".into()));
                    }
                }
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(OracleError::Invalid("noise_sd must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The default randomized test DGP: `X ∈ {0, 1, 2}`, `M ∈ {0, 1, 2, 3}`
    /// and, with `prior_mediator`, a binary `W`.
    pub fn random(seed: u64, prior_mediator: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = 3;
        let nm = 4;
        let nw = if prior_mediator { 2 } else { 1 };
        let f_x = random_simplex(&mut rng, nx);
        let propensity: Vec<f64> = (0..nx).map(|_| rng.random_range(0.35..0.65)).collect();
        let f_w = prior_mediator.then(|| {
            (0..2)
                .map(|_| (0..nx).map(|_| random_simplex(&mut rng, nw)).collect())
                .collect::<Vec<Vec<Vec<f64>>>>()
        });
        let f_m = (0..2)
            .map(|_| {
                (0..nx)
                    .map(|_| (0..nw).map(|_| random_simplex(&mut rng, nm)).collect())
                    .collect()
            })
            .collect();
        let mu = (0..2)
            .map(|t| {
                (0..nx)
                    .map(|x| {
                        (0..nw)
                            .map(|w| {
                                (0..nm)
                                    .map(|m| {
                                        let (t, x, w, m) = (t as f64, x as f64, w as f64, m as f64);
                                        1.0 + 0.5 * t + 0.3 * x + 0.4 * m + 0.25 * t * m + 0.3 * w
                                            + rng.random_range(-0.3..0.3)
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let dgp = DiscreteDGP {
            x_support: (0..nx).map(|x| vec![x as f64]).collect(),
            f_x,
            propensity,
            w_support: prior_mediator.then(|| (0..nw).map(|w| w as f64).collect()),
            f_w,
            m_support: (0..nm).map(|m| m as f64).collect(),
            f_m,
            mu,
            noise_sd: 1.0,
        };
        dgp.validate().expect("random DGP is valid");
        dgp
    }

    /// Copies the control-arm mediator law onto the treated arm, so the
    /// treatment cannot move the mediators.
    pub fn with_mediator_unaffected(mut self) -> Self {
        self.f_m[1] = self.f_m[0].clone();
        if let Some(fw) = &mut self.f_w {
            fw[1] = fw[0].clone();
        }
        self
    }

    /// Replaces each outcome mean by its average over `m`, so the outcome
    /// ignores the mediator.
    pub fn with_outcome_ignoring_mediator(mut self) -> Self {
        for tx in &mut self.mu {
            for xw in tx {
                for row in xw {
                    let avg = row.iter().sum::<f64>() / row.len() as f64;
                    row.iter_mut().for_each(|v| *v = avg);
                }
            }
        }
        self
    }

    pub fn has_prior_mediator(&self) -> bool {
        self.w_support.is_some()
    }

    fn nw(&self) -> usize {
        self.w_support.as_ref().map_or(1, Vec::len)
    }

    fn tables(&self) -> Tables {
        let nx = self.x_support.len();
        Tables {
            fx: self.f_x.clone(),
            e: self.propensity.clone(),
            fw: self
                .f_w
                .clone()
                .unwrap_or_else(|| vec![vec![vec![1.0]; nx]; 2]),
            fm: self.f_m.clone(),
            mu: self.mu.clone(),
        }
    }

    pub fn functionals(&self) -> Functionals {
        self.tables().functionals()
    }

    pub fn true_values(&self) -> EstimandSet {
        let f = self.functionals();
        let mut e = EstimandSet::from_means(f.delta1, f.delta0, f.theta0, f.theta1);
        e.ndeu = Some(f.ndeu);
        if self.has_prior_mediator() {
            e.multimediator = Some(PathEffects {
                theta_w: f.theta_w,
                path_w: f.delta1 - f.theta_w,
                path_m: f.theta_w - f.theta0,
                direct: f.theta0 - f.delta0,
            });
        }
        e
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset, OracleError> {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset, OracleError> {
        self.validate()?;
        let r1 = self.x_support[0].len();
        let nx = self.x_support.len();
        let x_dist = WeightedIndex::new(&self.f_x).map_err(|e| OracleError::Invalid(e.to_string()))?;
        let nw = self.nw();
        let w_dists: Option<Vec<Vec<WeightedIndex<f64>>>> = self.f_w.as_ref().map(|fw| {
            fw.iter()
                .map(|tx| tx.iter().map(|p| WeightedIndex::new(p).expect("validated")).collect())
                .collect()
        });
        let m_dists: Vec<Vec<Vec<WeightedIndex<f64>>>> = self
            .f_m
            .iter()
            .map(|tx| {
                tx.iter()
                    .map(|xw| xw.iter().map(|p| WeightedIndex::new(p).expect("validated")).collect())
                    .collect()
            })
            .collect();
        debug_assert_eq!(m_dists[0].len(), nx);

        let mut x = DMatrix::zeros(n, r1);
        let mut m = DMatrix::zeros(n, 1);
        let mut w = w_dists.as_ref().map(|_| DMatrix::zeros(n, 1));
        let mut y = DVector::zeros(n);
        let mut treated = Vec::with_capacity(n);
        for i in 0..n {
            let xi = x_dist.sample(rng);
            let t = rng.random::<f64>() < self.propensity[xi];
            let ti = t as usize;
            let wi = match &w_dists {
                Some(d) => d[ti][xi].sample(rng),
                None => 0,
            };
            debug_assert!(wi < nw);
            let mi = m_dists[ti][xi][wi].sample(rng);
            let eps: f64 = rng.sample(StandardNormal);
            for j in 0..r1 {
                x[(i, j)] = self.x_support[xi][j];
            }
            m[(i, 0)] = self.m_support[mi];
            if let (Some(wm), Some(ws)) = (&mut w, &self.w_support) {
                wm[(i, 0)] = ws[wi];
            }
            y[i] = self.mu[ti][xi][wi][mi] + self.noise_sd * eps;
            treated.push(t);
        }
        Ok(Dataset::new(treated, y, x, m, w)?)
    }

    /// `E[S²]` for every estimand, from the closed-form efficient influence
    /// functions (path terms use [`Self::numeric_influence_variance`]).
    pub fn true_influence_variance(&self) -> Result<InfluenceVariances, OracleError> {
        self.validate()?;
        let tb = self.tables();
        let f = tb.functionals();
        let (nx, nw, nm) = (tb.nx(), tb.nw(), tb.nm());
        let s2 = self.noise_sd * self.noise_sd;
        // η(ty, tm, x) = Σ_{w,m} μ(ty, x, w, m) f(w, m | tm, x).
        let eta = |ty: usize, tm: usize, x: usize| -> f64 {
            let mut s = 0.0;
            for w in 0..nw {
                for m in 0..nm {
                    s += tb.mu[ty][x][w][m] * tb.fj(tm, x, w, m);
                }
            }
            s
        };
        let f0: f64 = (0..nx).map(|x| tb.fx[x] * tb.ft(0, x)).sum();

        // Each influence function is a·(Y − μ_cell) + b on a cell, so
        // E[S²] = Σ_cells p (a² σ² + b²).
        let mut acc = vec![0.0; Estimand::SINGLE.len()];
        for x in 0..nx {
            for t in 0..2 {
                for w in 0..nw {
                    for m in 0..nm {
                        let p = tb.fx[x] * tb.ft(t, x) * tb.fj(t, x, w, m);
                        let mu_c = tb.mu[t][x][w][m];
                        let is = |s: usize| if t == s { 1.0 } else { 0.0 };
                        // S_δ_s.
                        let delta = |s: usize, target: f64| -> (f64, f64) {
                            let a = is(s) / tb.ft(s, x);
                            let m_s = eta(s, s, x);
                            (a, a * (mu_c - m_s) + m_s - target)
                        };
                        // S_θ_s, where θ_s = E[Y(1−s, M(s))].
                        let theta = |s: usize, target: f64| -> (f64, f64) {
                            let o = 1 - s;
                            let a = is(o) * tb.fj(s, x, w, m) / (tb.ft(o, x) * tb.fj(o, x, w, m));
                            let e = eta(o, s, x);
                            let b = is(s) * (tb.mu[o][x][w][m] - e) / tb.ft(s, x) + e - target;
                            (a, b)
                        };
                        let d1 = delta(1, f.delta1);
                        let d0 = delta(0, f.delta0);
                        let th0 = theta(0, f.theta0);
                        let th1 = theta(1, f.theta1);
                        let sub = |u: (f64, f64), v: (f64, f64)| (u.0 - v.0, u.1 - v.1);
                        let ndeu = if t == 1 {
                            // f(T=0|x,j)/f(T=1|x,j)
                            let odds = tb.ft(0, x) * tb.fj(0, x, w, m) / (tb.ft(1, x) * tb.fj(1, x, w, m));
                            (odds / f0, 0.0)
                        } else {
                            (-1.0 / f0, (tb.mu[1][x][w][m] - tb.mu[0][x][w][m] - f.ndeu) / f0)
                        };
                        let parts = [
                            d1,
                            d0,
                            th0,
                            th1,
                            sub(d1, th0),
                            sub(th0, d0),
                            sub(th1, d0),
                            sub(d1, d0),
                            ndeu,
                        ];
                        for (k, (a, b)) in parts.iter().enumerate() {
                            acc[k] += p * (a * a * s2 + b * b);
                        }
                    }
                }
            }
        }
        let mut entries: Vec<(Estimand, f64)> = Estimand::SINGLE.iter().copied().zip(acc).collect();
        if self.has_prior_mediator() {
            for e in Estimand::PATHS {
                entries.push((e, self.numeric_influence_variance(e)?));
            }
        }
        Ok(InfluenceVariances { entries })
    }

    /// `E[S²]` of the nonparametric influence function of `estimand`,
    /// by central differences of the exact functional in the cell
    /// probabilities and cell means:
    /// `Σ_c p_c (D_c − D̄)² + Σ_c (∂ψ/∂μ_c)² σ² / p_c`.
    pub fn numeric_influence_variance(&self, estimand: Estimand) -> Result<f64, OracleError> {
        self.validate()?;
        let tb = self.tables();
        let (nx, nw, nm) = (tb.nx(), tb.nw(), tb.nm());
        let p = tb.joint();
        let psi = |p: &[f64], mu: &[Vec<Vec<Vec<f64>>>]| {
            estimand.value(&Tables::from_joint(p, mu, nx, nw, nm).functionals())
        };
        let mut dp = vec![0.0; p.len()];
        let mut dmu = vec![0.0; p.len()];
        for c in 0..p.len() {
            let h = 1e-6 * p[c];
            let mut up = p.clone();
            let mut down = p.clone();
            up[c] += h;
            down[c] -= h;
            dp[c] = (psi(&up, &tb.mu) - psi(&down, &tb.mu)) / (2.0 * h);

            let (x, rest) = (c / (2 * nw * nm), c % (2 * nw * nm));
            let (t, w, m) = (rest / (nw * nm), (rest / nm) % nw, rest % nm);
            let hm = 1e-4;
            let mut mu_up = tb.mu.clone();
            let mut mu_down = tb.mu.clone();
            mu_up[t][x][w][m] += hm;
            mu_down[t][x][w][m] -= hm;
            dmu[c] = (psi(&p, &mu_up) - psi(&p, &mu_down)) / (2.0 * hm);
        }
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let s2 = self.noise_sd * self.noise_sd;
        Ok(p.iter()
            .zip(dp.iter().zip(&dmu))
            .map(|(&pc, (&d, &g))| pc * (d - mean).powi(2) + g * g * s2 / pc)
            .sum())
    }
}

/// Linear-Gaussian DGP with `X ~ U[−1, 1]^{r₁}` and a linear propensity:
///
/// ```text
/// P(T = 1 | X) = c0 + cᵀX
/// M = a0 + a_t T + a_xᵀX + σ_m ε_m
/// Y = b0 + b_t T + b_m M + b_tm T·M + b_xᵀX + σ_y ε_y
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNormalDGP {
    pub c0: f64,
    pub c: Vec<f64>,
    pub a0: f64,
    pub a_t: f64,
    pub a_x: Vec<f64>,
    pub sigma_m: f64,
    pub b0: f64,
    pub b_t: f64,
    pub b_m: f64,
    pub b_tm: f64,
    pub b_x: Vec<f64>,
    pub sigma_y: f64,
}

impl Default for LinearNormalDGP {
    fn default() -> Self {
        Self {
            c0: 0.5,
            c: vec![0.15, -0.1],
            a0: 0.2,
            a_t: 0.6,
            a_x: vec![0.5, -0.3],
            sigma_m: 1.0,
            b0: 1.0,
            b_t: 0.8,
            b_m: 0.7,
            b_tm: 0.3,
            b_x: vec![0.4, 0.6],
            sigma_y: 1.0,
        }
    }
}

impl LinearNormalDGP {
    pub fn r1(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let r1 = self.c.len();
        if r1 == 0 || self.a_x.len() != r1 || self.b_x.len() != r1 {
            return Err(OracleError::Invalid("c, a_x and b_x need the same positive length".into()));
        }
        let spread: f64 = self.c.iter().map(|v| v.abs()).sum();
        if !(self.c0 - spread > 0.0 && self.c0 + spread < 1.0) {
            return Err(OracleError::Invalid("propensity must stay strictly inside (0, 1) on the cube".into()));
        }
        if !(self.sigma_m > 0.0 && self.sigma_y > 0.0) {
            return Err(OracleError::Invalid("noise scales must be positive".into()));
        }
        let all = [self.a0, self.a_t, self.b0, self.b_t, self.b_m, self.b_tm, self.c0];
        if all.iter().chain(&self.a_x).chain(&self.b_x).chain(&self.c).any(|v| !v.is_finite()) {
            return Err(OracleError::Invalid("coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Closed-form estimands; `E[X] = 0` and
    /// `E[X_j | T = 0] = −c_j / (3 (1 − c0))`.
    pub fn true_values(&self) -> EstimandSet {
        let m1 = self.a0 + self.a_t;
        let m0 = self.a0;
        let delta1 = self.b0 + self.b_t + (self.b_m + self.b_tm) * m1;
        let delta0 = self.b0 + self.b_m * m0;
        let theta0 = self.b0 + self.b_t + (self.b_m + self.b_tm) * m0;
        let theta1 = self.b0 + self.b_m * m1;
        let ax_untreated: f64 = self
            .a_x
            .iter()
            .zip(&self.c)
            .map(|(a, c)| a * (-c / (3.0 * (1.0 - self.c0))))
            .sum();
        let mut e = EstimandSet::from_means(delta1, delta0, theta0, theta1);
        e.ndeu = Some(self.b_t + self.b_tm * (self.a0 + ax_untreated));
        e
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset, OracleError> {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset, OracleError> {
        self.validate()?;
        let r1 = self.r1();
        let mut x = DMatrix::zeros(n, r1);
        let mut m = DMatrix::zeros(n, 1);
        let mut y = DVector::zeros(n);
        let mut treated = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = self.c0;
            let mut ax = 0.0;
            let mut bx = 0.0;
            for j in 0..r1 {
                let v = rng.random_range(-1.0..=1.0);
                x[(i, j)] = v;
                e += self.c[j] * v;
                ax += self.a_x[j] * v;
                bx += self.b_x[j] * v;
            }
            let t = rng.random::<f64>() < e;
            let tf = if t { 1.0 } else { 0.0 };
            let em: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            let mi = self.a0 + self.a_t * tf + ax + self.sigma_m * em;
            m[(i, 0)] = mi;
            y[i] = self.b0 + self.b_t * tf + (self.b_m + self.b_tm * tf) * mi + bx + self.sigma_y * ey;
            treated.push(t);
        }
        Ok(Dataset::new(treated, y, x, m, None)?)
    }
}

/// Null structure imposed on a random discrete DGP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullEffect {
    MediatorUnaffected,
    OutcomeIgnoresMediator,
}

/// Serializable DGP description, as found in simulation config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DgpSpec {
    /// [`DiscreteDGP::random`] with an optional null structure.
    RandomDiscrete {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        prior_mediator: bool,
        #[serde(default)]
        null: Option<NullEffect>,
    },
    Discrete(DiscreteDGP),
    LinearNormal(LinearNormalDGP),
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec::RandomDiscrete {
            seed: 0,
            prior_mediator: false,
            null: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dgp {
    Discrete(DiscreteDGP),
    LinearNormal(LinearNormalDGP),
}

impl DgpSpec {
    pub fn build(&self) -> Result<Dgp, OracleError> {
        let dgp = match self {
            DgpSpec::RandomDiscrete {
                seed,
                prior_mediator,
                null,
            } => {
                let d = DiscreteDGP::random(*seed, *prior_mediator);
                Dgp::Discrete(match null {
                    None => d,
                    Some(NullEffect::MediatorUnaffected) => d.with_mediator_unaffected(),
                    Some(NullEffect::OutcomeIgnoresMediator) => d.with_outcome_ignoring_mediator(),
                })
            }
            DgpSpec::Discrete(d) => Dgp::Discrete(d.clone()),
            DgpSpec::LinearNormal(d) => Dgp::LinearNormal(d.clone()),
        };
        match &dgp {
            Dgp::Discrete(d) => d.validate()?,
            Dgp::LinearNormal(d) => d.validate()?,
        }
        Ok(dgp)
    }
}

impl Dgp {
    pub fn true_values(&self) -> EstimandSet {
        match self {
            Dgp::Discrete(d) => d.true_values(),
            Dgp::LinearNormal(d) => d.true_values(),
        }
    }

    pub fn true_influence_variance(&self) -> Result<InfluenceVariances, OracleError> {
        match self {
            Dgp::Discrete(d) => d.true_influence_variance(),
            Dgp::LinearNormal(_) => Err(OracleError::ContinuousUnsupported),
        }
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset, OracleError> {
        match self {
            Dgp::Discrete(d) => d.sample_with(n, rng),
            Dgp::LinearNormal(d) => d.sample_with(n, rng),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Dgp::Discrete(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Binary X and binary M, f(t|x) = 1/2, M ⫫ T | X, no noise.
    fn minimal() -> DiscreteDGP {
        let fm = vec![vec![vec![0.4, 0.6]], vec![vec![0.7, 0.3]]];
        DiscreteDGP {
            x_support: vec![vec![0.0], vec![1.0]],
            f_x: vec![0.5, 0.5],
            propensity: vec![0.5, 0.5],
            w_support: None,
            f_w: None,
            m_support: vec![0.0, 1.0],
            f_m: vec![fm.clone(), fm],
            mu: vec![
                vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 2.0]]],
                vec![vec![vec![2.0, 4.0]], vec![vec![3.0, 3.0]]],
            ],
            noise_sd: 0.0,
        }
    }

    #[test]
    fn delta1_influence_matches_hand_computation() {
        // E[Y|x=0,T=1] = 0.4·2 + 0.6·4 = 3.2, E[Y|x=1,T=1] = 3, δ₁ = 3.1.
        // S = 2·1{T=1}(Y − m₁(X)) + m₁(X) − δ₁:
        //  x=0, T=1: 2(Y − 3.2) + 0.1 with Y ∈ {2 (0.4), 4 (0.6)}
        //  x=0, T=0: 0.1; x=1, T=1: −0.1; x=1, T=0: −0.1.
        let d = minimal();
        let t = d.true_values();
        assert!((t.delta1 - 3.1).abs() < 1e-15);
        let x0t1 = 0.4 * (2.0f64 * (2.0 - 3.2) + 0.1).powi(2) + 0.6 * (2.0f64 * (4.0 - 3.2) + 0.1).powi(2);
        let hand = 0.25 * x0t1 + 0.25 * 0.01 + 0.25 * 0.01 + 0.25 * 0.01;
        let v = d.true_influence_variance().unwrap();
        assert!((v.get(Estimand::Delta1).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn mediator_unaffected_gives_zero_indirect_effects() {
        let d = DiscreteDGP::random(3, false).with_mediator_unaffected();
        let t = d.true_values();
        assert!(t.nie.abs() < 1e-14 && t.pie.abs() < 1e-14);
    }

    #[test]
    fn outcome_ignoring_mediator_gives_nde_equal_ate() {
        let d = DiscreteDGP::random(4, false).with_outcome_ignoring_mediator();
        let t = d.true_values();
        assert!(t.nie.abs() < 1e-14);
        assert!((t.nde - t.ate).abs() < 1e-14);
    }

    #[test]
    fn theta0_matches_weighted_form() {
        // θ₀ = E[T N r₀ Y] with N r₀ = f(0|x,m) / (f(1|x,m) f(0|x)).
        for seed in 0..5 {
            let d = DiscreteDGP::random(seed, false);
            let mut weighted = 0.0;
            for x in 0..3 {
                let e = d.propensity[x];
                for m in 0..4 {
                    let j1 = e * d.f_m[1][x][0][m];
                    let j0 = (1.0 - e) * d.f_m[0][x][0][m];
                    let ftxm0 = j0 / (j0 + j1);
                    let ftxm1 = j1 / (j0 + j1);
                    let nr0 = ftxm0 / (ftxm1 * (1.0 - e));
                    weighted += d.f_x[x] * j1 * nr0 * d.mu[1][x][0][m];
                }
            }
            assert!((weighted - d.true_values().theta0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_variances_match_numeric_gradient() {
        for (seed, w) in [(1, false), (2, true)] {
            let d = DiscreteDGP::random(seed, w);
            let v = d.true_influence_variance().unwrap();
            for e in Estimand::SINGLE {
                let closed = v.get(e).unwrap();
                let numeric = d.numeric_influence_variance(e).unwrap();
                assert!((closed - numeric).abs() < 1e-6 * closed, "{e:?}: {closed} vs {numeric}");
            }
        }
    }

    #[test]
    fn constant_outcome_has_zero_influence() {
        let mut d = DiscreteDGP::random(5, true);
        for tx in &mut d.mu {
            for xw in tx {
                for row in xw {
                    row.iter_mut().for_each(|v| *v = 2.0);
                }
            }
        }
        d.noise_sd = 0.0;
        for (_, v) in d.true_influence_variance().unwrap().entries {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_outcome_scales_variance_quadratically() {
        let d = DiscreteDGP::random(6, false);
        let mut s = d.clone();
        for tx in &mut s.mu {
            for xw in tx {
                for row in xw {
                    row.iter_mut().for_each(|v| *v *= 3.0);
                }
            }
        }
        s.noise_sd *= 3.0;
        let a = d.true_influence_variance().unwrap();
        let b = s.true_influence_variance().unwrap();
        for (e, v) in a.entries {
            assert!((b.get(e).unwrap() - 9.0 * v).abs() < 1e-10 * v.max(1.0));
        }
    }

    #[test]
    fn paths_telescope() {
        let t = DiscreteDGP::random(7, true).true_values();
        let p = t.multimediator.unwrap();
        assert!((p.path_w + p.path_m + p.direct - t.ate).abs() < 1e-14);
        assert!((t.nie + t.nde - t.ate).abs() < 1e-14);
    }

    #[test]
    fn degenerate_propensity_is_rejected() {
        let mut d = minimal();
        d.propensity[0] = 1.0;
        assert!(matches!(d.validate(), Err(OracleError::Invalid(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_matches_tables() {
        let d = DiscreteDGP {
            f_x: vec![0.7, 0.3],
            ..minimal()
        };
        assert_eq!(d.sample(500, 9).unwrap().y(), d.sample(500, 9).unwrap().y());
        let big = d.sample(1_000_000, 11).unwrap();
        let freq = big.x().column(0).iter().filter(|&&v| v == 1.0).count() as f64 / 1e6;
        assert!((freq - 0.3).abs() < 0.002, "{freq}");
    }

    #[test]
    fn replication_streams_differ() {
        let mut a = replication_rng(1, 0);
        let mut b = replication_rng(1, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
        let mut c = replication_rng(1, 0);
        assert_eq!(replication_rng(1, 0).random::<u64>(), c.random::<u64>());
    }

    #[test]
    fn linear_normal_validates_propensity() {
        let mut d = LinearNormalDGP::default();
        assert!(d.validate().is_ok());
        d.c0 = 0.1;
        assert!(d.validate().is_err());
        assert!(matches!(
            Dgp::LinearNormal(LinearNormalDGP::default()).true_influence_variance(),
            Err(OracleError::ContinuousUnsupported)
        ));
    }

    #[test]
    fn spec_round_trips_through_serde() {
        let spec = DgpSpec::Discrete(minimal());
        let json = serde_json::to_string(&spec).unwrap();
        let back: DgpSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
