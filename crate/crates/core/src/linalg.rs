use nalgebra::{DMatrix, SymmetricEigen};

const RIDGE: f64 = 1e-8;

/// Outcome of a symmetric positive definite solve.
#[derive(Debug, Clone)]
pub(crate) struct SpdSolve {
    pub solution: DMatrix<f64>,
    pub condition: f64,
    pub ridged: bool,
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub(crate) fn condition_number(sym: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(sym.clone()).eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e.abs()), hi.max(e.abs()))
    });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `a x = b` for symmetric positive definite `a`, retrying once with a
/// `1e-8·(trace/K)` ridge. `None` when both factorizations fail.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<SpdSolve> {
    let condition = condition_number(a);
    if let Some(c) = a.clone().cholesky() {
        return Some(SpdSolve {
            solution: c.solve(b),
            condition,
            ridged: false,
        });
    }
    let k = a.nrows();
    let ridge = (RIDGE * a.trace() / k as f64).max(f64::MIN_POSITIVE);
    let ridged = a + DMatrix::identity(k, k) * ridge;
    ridged.cholesky().map(|c| SpdSolve {
        solution: c.solve(b),
        condition,
        ridged: true,
    })
}

pub(crate) fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
