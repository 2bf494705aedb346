//! Strictly concave generators `ρ` of the dual calibration programs and the
//! primal distance each one induces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CalibError;

/// A strictly concave `ρ` with `ρ'(0) = 1`. Calibration weights are
/// `ρ'(coefᵀ basis) / N`.
pub trait ConcaveGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, v: f64) -> f64;
    fn deriv1(&self, v: f64) -> f64;
    fn deriv2(&self, v: f64) -> f64;

    /// Open lower end of the domain (`-∞` or a finite bound).
    fn domain_lower(&self) -> f64 {
        f64::NEG_INFINITY
    }

    fn in_domain(&self, v: f64) -> bool {
        v > self.domain_lower() && v.is_finite()
    }

    /// `(ρ')⁻¹(w)`, or `None` when `w` is outside the range of `ρ'`.
    ///
    /// The default bisects on the decreasing `ρ'`.
    fn deriv1_inverse(&self, w: f64) -> Option<f64> {
        bisect_decreasing(|v| self.deriv1(v), w, self.domain_lower())
    }
}

/// Solves `f(v) = target` for a decreasing `f` on `(lower, ∞)`.
fn bisect_decreasing(f: impl Fn(f64) -> f64, target: f64, lower: f64) -> Option<f64> {
    if !target.is_finite() {
        return None;
    }
    let mut hi = 1.0;
    let mut steps = 0;
    while f(hi) > target {
        hi = 2.0 * hi + 1.0;
        steps += 1;
        if steps > 200 || !hi.is_finite() {
            return None;
        }
    }
    let mut lo = if lower.is_finite() {
        lower + (0.0 - lower) * 0.5
    } else {
        -1.0
    };
    steps = 0;
    while f(lo) < target {
        lo = if lower.is_finite() {
            lower + (lo - lower) * 0.5
        } else {
            2.0 * lo - 1.0
        };
        steps += 1;
        if steps > 1100 || !lo.is_finite() || (lower.is_finite() && lo <= lower) {
            return None;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// The three generators in common use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RhoFamily {
    /// `ρ(v) = -exp(-v)`; weights are exponential-tilting weights.
    #[default]
    ExponentialTilting,
    /// `ρ(v) = log(1 + v)` on `v > -1`.
    EmpiricalLikelihood,
    /// `ρ(v) = -(1 - v)² / 2`; weights may be negative.
    ContinuousUpdating,
}

impl RhoFamily {
    pub const ALL: [RhoFamily; 3] = [
        RhoFamily::ExponentialTilting,
        RhoFamily::EmpiricalLikelihood,
        RhoFamily::ContinuousUpdating,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            RhoFamily::ExponentialTilting => "et",
            RhoFamily::EmpiricalLikelihood => "el",
            RhoFamily::ContinuousUpdating => "cue",
        }
    }
}

impl fmt::Display for RhoFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RhoFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "et" | "exponential_tilting" => Ok(RhoFamily::ExponentialTilting),
            "el" | "empirical_likelihood" => Ok(RhoFamily::EmpiricalLikelihood),
            "cue" | "continuous_updating" => Ok(RhoFamily::ContinuousUpdating),
            other => Err(format!("unknown rho family `{other}` (expected et, el or cue)")),
        }
    }
}

impl ConcaveGenerator for RhoFamily {
    fn name(&self) -> &str {
        match self {
            RhoFamily::ExponentialTilting => "exponential_tilting",
            RhoFamily::EmpiricalLikelihood => "empirical_likelihood",
            RhoFamily::ContinuousUpdating => "continuous_updating",
        }
    }

    #[inline]
    fn value(&self, v: f64) -> f64 {
        match self {
            RhoFamily::ExponentialTilting => -(-v).exp(),
            RhoFamily::EmpiricalLikelihood => {
                if v > -1.0 {
                    v.ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            }
            RhoFamily::ContinuousUpdating => -0.5 * (1.0 - v) * (1.0 - v),
        }
    }

    #[inline]
    fn deriv1(&self, v: f64) -> f64 {
        match self {
            RhoFamily::ExponentialTilting => (-v).exp(),
            RhoFamily::EmpiricalLikelihood => 1.0 / (1.0 + v),
            RhoFamily::ContinuousUpdating => 1.0 - v,
        }
    }

    #[inline]
    fn deriv2(&self, v: f64) -> f64 {
        match self {
            RhoFamily::ExponentialTilting => -(-v).exp(),
            RhoFamily::EmpiricalLikelihood => -1.0 / ((1.0 + v) * (1.0 + v)),
            RhoFamily::ContinuousUpdating => -1.0,
        }
    }

    fn domain_lower(&self) -> f64 {
        match self {
            RhoFamily::EmpiricalLikelihood => -1.0,
            _ => f64::NEG_INFINITY,
        }
    }

    fn deriv1_inverse(&self, w: f64) -> Option<f64> {
        if !w.is_finite() {
            return None;
        }
        match self {
            RhoFamily::ExponentialTilting => (w > 0.0).then(|| -w.ln()),
            RhoFamily::EmpiricalLikelihood => (w > 0.0).then(|| 1.0 / w - 1.0),
            RhoFamily::ContinuousUpdating => Some(1.0 - w),
        }
    }
}

/// The primal distance `D(w) = D(w, 1)` induced by `rho`, normalized so that
/// `D(1) = 0`:
///
/// `D(w) = ρ(v) - v·w - ρ(0)` with `v = (ρ')⁻¹(w)`.
///
/// With this normalization `ρ(v) - ρ(0) = D(w*) + v·w*` where `D'(w*) = -v`.
/// The additive constant does not move any dual maximizer.
pub fn induced_distance<R: ConcaveGenerator + ?Sized>(rho: &R, w: f64) -> Result<f64, CalibError> {
    let v = rho
        .deriv1_inverse(w)
        .ok_or(CalibError::OutOfRange { w })?;
    Ok(rho.value(v) - v * w - rho.value(0.0))
}
