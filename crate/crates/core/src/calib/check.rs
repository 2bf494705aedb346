//! Self-checks for a generator `ρ`: normalization, strict concavity,
//! derivative consistency and the primal–dual identity with its induced
//! distance.

use serde::Serialize;

use super::{induced_distance, ConcaveGenerator};

/// Points on `[-2, 2]` used by the grid checks (before intersecting with the
/// domain of `ρ`).
pub const DUALITY_GRID_POINTS: usize = 401;

const DUALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst deviation seen (0 for purely logical checks).
    pub worst: f64,
    pub detail: String,
}

fn grid<R: ConcaveGenerator + ?Sized>(rho: &R) -> Vec<f64> {
    (0..DUALITY_GRID_POINTS)
        .map(|k| -2.0 + 4.0 * k as f64 / (DUALITY_GRID_POINTS - 1) as f64)
        .filter(|&v| rho.in_domain(v))
        .collect()
}

/// Central difference of the induced distance.
fn distance_slope<R: ConcaveGenerator + ?Sized>(rho: &R, w: f64) -> Option<f64> {
    let h = 1e-6 * w.abs().max(1e-3);
    let up = induced_distance(rho, w + h).ok()?;
    let down = induced_distance(rho, w - h).ok()?;
    Some((up - down) / (2.0 * h))
}

/// Solves `D'(w) = -v` by bisection on the numerically differentiated `D`.
/// Independent of `ρ'` except through `D` itself.
pub(crate) fn conjugate_point<R: ConcaveGenerator + ?Sized>(rho: &R, v: f64) -> Option<f64> {
    let target = -v;
    let slope = |w: f64| distance_slope(rho, w);
    let (mut lo, mut hi) = (1.0, 1.0);
    let mut guard = 0;
    while slope(hi)? < target {
        hi = 2.0 * hi + 1.0;
        guard += 1;
        if guard > 200 {
            return None;
        }
    }
    guard = 0;
    loop {
        match slope(lo) {
            Some(s) if s <= target => break,
            Some(_) => {
                lo = if induced_distance(rho, lo - 1.0).is_ok() && distance_slope(rho, lo - 1.0).is_some() {
                    lo - 1.0
                } else {
                    lo * 0.5
                };
            }
            None => lo *= 0.5,
        }
        guard += 1;
        if guard > 2000 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Runs every check and returns one outcome per check.
pub fn run_checks<R: ConcaveGenerator + ?Sized>(rho: &R) -> Vec<CheckOutcome> {
    let pts = grid(rho);
    let mut out = Vec::new();

    let d1 = rho.deriv1(0.0);
    out.push(CheckOutcome {
        name: "deriv1_at_zero",
        passed: (d1 - 1.0).abs() <= 1e-12,
        worst: (d1 - 1.0).abs(),
        detail: format!("rho'(0) = {d1}"),
    });

    let worst_curv = pts
        .iter()
        .map(|&v| rho.deriv2(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let bad = pts.iter().filter(|&&v| !(rho.deriv2(v) < 0.0)).count();
    out.push(CheckOutcome {
        name: "strict_concavity",
        passed: bad == 0,
        worst: worst_curv,
        detail: format!("max rho'' on grid = {worst_curv:.6e}; {bad} non-negative points"),
    });

    let mut worst_fd: f64 = 0.0;
    for &v in &pts {
        let h = 1e-5;
        if !(rho.in_domain(v - h) && rho.in_domain(v + h)) {
            continue;
        }
        let fd1 = (rho.value(v + h) - rho.value(v - h)) / (2.0 * h);
        let fd2 = (rho.deriv1(v + h) - rho.deriv1(v - h)) / (2.0 * h);
        let e1 = (fd1 - rho.deriv1(v)).abs() / (1.0 + rho.deriv1(v).abs());
        let e2 = (fd2 - rho.deriv2(v)).abs() / (1.0 + rho.deriv2(v).abs());
        worst_fd = worst_fd.max(e1).max(e2);
    }
    out.push(CheckOutcome {
        name: "derivative_consistency",
        passed: worst_fd < 1e-5,
        worst: worst_fd,
        detail: format!("max relative finite-difference mismatch {worst_fd:.3e}"),
    });

    let rho0 = rho.value(0.0);
    let mut worst_dual: f64 = 0.0;
    let mut failures = 0;
    for &v in &pts {
        match conjugate_point(rho, v).and_then(|w| induced_distance(rho, w).ok().map(|d| (w, d))) {
            Some((w, d)) => {
                let err = ((rho.value(v) - rho0) - (d + v * w)).abs();
                worst_dual = worst_dual.max(err);
            }
            None => failures += 1,
        }
    }
    out.push(CheckOutcome {
        name: "duality_identity",
        passed: failures == 0 && worst_dual < DUALITY_TOL,
        worst: worst_dual,
        detail: format!(
            "max |rho(v) - rho(0) - [D(w*) + v w*]| = {worst_dual:.3e} over {} points ({failures} unresolved)",
            pts.len()
        ),
    });

    // D must vanish at 1, be nonnegative and strictly convex over the
    // weights the grid produces.
    let ws: Vec<f64> = pts.iter().map(|&v| rho.deriv1(v)).filter(|w| w.is_finite()).collect();
    let (w_lo, w_hi) = ws
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    let mut convex_ok = induced_distance(rho, 1.0).map(|d| d.abs() < 1e-12).unwrap_or(false);
    let mut min_second: f64 = f64::INFINITY;
    let steps = 200;
    let h = (w_hi - w_lo) / steps as f64;
    for k in 1..steps {
        let w = w_lo + h * k as f64;
        match (
            induced_distance(rho, w - h),
            induced_distance(rho, w),
            induced_distance(rho, w + h),
        ) {
            (Ok(a), Ok(b), Ok(c)) => {
                let second = (a - 2.0 * b + c) / (h * h);
                min_second = min_second.min(second);
                if !(second > 0.0) || b < -1e-12 {
                    convex_ok = false;
                }
            }
            _ => convex_ok = false,
        }
    }
    out.push(CheckOutcome {
        name: "distance_convexity",
        passed: convex_ok,
        worst: min_second,
        detail: format!("D(1) = 0, min second difference on [{w_lo:.3}, {w_hi:.3}] = {min_second:.3e}"),
    });

    // Informational: where ρ' reaches zero the weights can vanish.
    let boundary = pts.iter().copied().find(|&v| rho.deriv1(v) <= 0.0);
    out.push(CheckOutcome {
        name: "weight_boundary",
        passed: true,
        worst: boundary.map(|v| rho.deriv1(v)).unwrap_or(0.0),
        detail: match boundary {
            Some(v) => format!("rho'({v}) = {}: weights can reach zero or go negative", rho.deriv1(v)),
            None => "rho' > 0 on the whole grid: weights stay positive".into(),
        },
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::RhoFamily;

    #[test]
    fn all_families_pass() {
        for rho in RhoFamily::ALL {
            for c in run_checks(&rho) {
                assert!(c.passed, "{rho}: {} failed: {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn cue_reports_zero_weight_boundary() {
        let checks = run_checks(&RhoFamily::ContinuousUpdating);
        let b = checks.iter().find(|c| c.name == "weight_boundary").unwrap();
        assert!(b.detail.contains("rho'(1) = 0"), "{}", b.detail);
        let et = run_checks(&RhoFamily::ExponentialTilting);
        let b = et.iter().find(|c| c.name == "weight_boundary").unwrap();
        assert!(b.detail.contains("stay positive"));
    }

    /// ρ(v) = v − v²/2 + v⁴/4 has ρ'' = −1 + 3v², positive for |v| > 1/√3.
    struct Corrupted;

    impl ConcaveGenerator for Corrupted {
        fn name(&self) -> &str {
            "corrupted"
        }
        fn value(&self, v: f64) -> f64 {
            v - v * v / 2.0 + v.powi(4) / 4.0
        }
        fn deriv1(&self, v: f64) -> f64 {
            1.0 - v + v.powi(3)
        }
        fn deriv2(&self, v: f64) -> f64 {
            -1.0 + 3.0 * v * v
        }
    }

    #[test]
    fn corrupted_rho_fails_concavity() {
        let checks = run_checks(&Corrupted);
        let c = checks.iter().find(|c| c.name == "strict_concavity").unwrap();
        assert!(!c.passed);
        assert!(c.worst > 0.0);
    }
}
