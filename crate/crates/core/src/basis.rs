//! Sieve bases: tensor products of normalized Legendre polynomials truncated
//! by total degree, evaluated as `n × K` design matrices.
//!
//! `P_k` is orthonormal for the uniform probability measure on `[-1, 1]`
//! (`P_k = √(2k+1)·Legendre_k`), so `P_0 ≡ 1` and column 0 of every design
//! matrix is exactly one. Multi-indices are ordered by total degree and,
//! within a degree, lexicographically descending: for two inputs the order is
//! `(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed overshoot of `|coordinate|` past 1 before evaluation is refused.
pub const RANGE_SLACK: f64 = 1e-9;

/// A cap of `UNCAPPED` leaves that input's degree unrestricted.
pub const UNCAPPED: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("basis dimension {hint} is unreachable: the degree caps admit only {max} functions")]
    InfeasibleDim { hint: usize, max: usize },
    #[error("point ({row}, {col}) = {value} lies outside [-1, 1]")]
    PointOutOfRange { row: usize, col: usize, value: f64 },
    #[error("invalid basis request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    input_dims: usize,
    max_total_degree: u32,
    per_dim_degree_cap: Vec<u32>,
    indices: Vec<Vec<u32>>,
}

impl BasisSpec {
    pub fn input_dims(&self) -> usize {
        self.input_dims
    }

    pub fn max_total_degree(&self) -> u32 {
        self.max_total_degree
    }

    pub fn per_dim_degree_cap(&self) -> &[u32] {
        &self.per_dim_degree_cap
    }

    /// Number of basis functions (`K` or `L`).
    pub fn target_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn multi_indices(&self) -> &[Vec<u32>] {
        &self.indices
    }
}

/// Multi-indices of total degree exactly `degree`, first coordinate descending.
fn shell(dims: usize, degree: u32, caps: &[u32], out: &mut Vec<Vec<u32>>) {
    fn rec(prefix: &mut Vec<u32>, dims: usize, left: u32, caps: &[u32], out: &mut Vec<Vec<u32>>) {
        let j = prefix.len();
        if j + 1 == dims {
            if left <= caps[j] {
                prefix.push(left);
                out.push(prefix.clone());
                prefix.pop();
            }
            return;
        }
        for a in (0..=left.min(caps[j])).rev() {
            prefix.push(a);
            rec(prefix, dims, left - a, caps, out);
            prefix.pop();
        }
    }
    if dims == 0 {
        if degree == 0 {
            out.push(Vec::new());
        }
        return;
    }
    rec(&mut Vec::with_capacity(dims), dims, degree, caps, out);
}

fn normalize_caps(input_dims: usize, degree_caps: &[u32]) -> Result<Vec<u32>, BasisError> {
    if degree_caps.is_empty() {
        return Ok(vec![UNCAPPED; input_dims]);
    }
    if degree_caps.len() != input_dims {
        return Err(BasisError::Invalid(format!(
            "{} degree caps given for {} inputs",
            degree_caps.len(),
            input_dims
        )));
    }
    Ok(degree_caps.to_vec())
}

/// Largest number of functions the caps admit, `∏(cap_j + 1)`, or `None`
/// when some input is uncapped.
pub fn max_admissible(input_dims: usize, degree_caps: &[u32]) -> Option<usize> {
    let caps = normalize_caps(input_dims, degree_caps).ok()?;
    caps.iter().try_fold(1usize, |acc, &c| {
        if c == UNCAPPED {
            None
        } else {
            Some(acc.saturating_mul(c as usize + 1))
        }
    })
}

/// Smallest complete total-degree set with at least `target_dim_hint`
/// functions. Empty `degree_caps` means no caps.
pub fn make_basis_spec(
    input_dims: usize,
    target_dim_hint: usize,
    degree_caps: &[u32],
) -> Result<BasisSpec, BasisError> {
    if target_dim_hint == 0 {
        return Err(BasisError::Invalid("target dimension hint must be >= 1".into()));
    }
    let caps = normalize_caps(input_dims, degree_caps)?;
    let top: Option<u64> = caps
        .iter()
        .try_fold(0u64, |acc, &c| (c != UNCAPPED).then_some(acc + c as u64));
    let mut indices = Vec::new();
    let mut degree = 0u32;
    loop {
        if let Some(top) = top {
            if degree as u64 > top {
                return Err(BasisError::InfeasibleDim {
                    hint: target_dim_hint,
                    max: indices.len(),
                });
            }
        }
        shell(input_dims, degree, &caps, &mut indices);
        if indices.len() >= target_dim_hint {
            break;
        }
        if input_dims == 0 {
            return Err(BasisError::InfeasibleDim {
                hint: target_dim_hint,
                max: 1,
            });
        }
        degree += 1;
    }
    Ok(BasisSpec {
        input_dims,
        max_total_degree: degree,
        per_dim_degree_cap: caps,
        indices,
    })
}

/// Normalized Legendre values `P_0(x), ..., P_max(x)`.
pub fn legendre_orthonormal(max_degree: usize, x: f64) -> Vec<f64> {
    let mut raw = Vec::with_capacity(max_degree + 1);
    raw.push(1.0);
    if max_degree >= 1 {
        raw.push(x);
    }
    for k in 1..max_degree {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * raw[k] - kf * raw[k - 1]) / (kf + 1.0);
        raw.push(next);
    }
    raw.iter()
        .enumerate()
        .map(|(k, p)| p * (2.0 * k as f64 + 1.0).sqrt())
        .collect()
}

/// An evaluated design matrix together with the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub spec: BasisSpec,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Entry `(i, α) = ∏_j P_{α_j}(points[i, j])`.
pub fn eval_basis(spec: &BasisSpec, points: &DMatrix<f64>) -> Result<BasisMatrix, BasisError> {
    if points.ncols() != spec.input_dims {
        return Err(BasisError::Invalid(format!(
            "points have {} columns, spec expects {}",
            points.ncols(),
            spec.input_dims
        )));
    }
    let n = points.nrows();
    let d = spec.input_dims;
    let top: Vec<usize> = (0..d)
        .map(|j| spec.indices.iter().map(|a| a[j] as usize).max().unwrap_or(0))
        .collect();
    let mut values = DMatrix::zeros(n, spec.target_dim());
    let mut table: Vec<Vec<f64>> = vec![Vec::new(); d];
    for i in 0..n {
        for j in 0..d {
            let v = points[(i, j)];
            if !(v.abs() <= 1.0 + RANGE_SLACK) {
                return Err(BasisError::PointOutOfRange {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            table[j] = legendre_orthonormal(top[j], v);
        }
        for (k, alpha) in spec.indices.iter().enumerate() {
            values[(i, k)] = alpha
                .iter()
                .enumerate()
                .map(|(j, &a)| table[j][a as usize])
                .product();
        }
    }
    Ok(BasisMatrix {
        values,
        spec: spec.clone(),
    })
}

/// Per-column degree caps from the data: a column with `k` distinct values
/// gets cap `k - 1` (a binary column gets 1, a constant column 0), since
/// higher powers are collinear on `k` points.
pub fn degree_caps_for(points: &DMatrix<f64>) -> Vec<u32> {
    points
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            (v.len().saturating_sub(1)).min(UNCAPPED as usize - 1) as u32
        })
        .collect()
}

/// Smallest `k` with `k³ >= n`.
fn ceil_cbrt(n: usize) -> usize {
    let mut k = (n as f64).cbrt().round() as usize;
    while k > 0 && (k - 1).pow(3) >= n {
        k -= 1;
    }
    while k.pow(3) < n {
        k += 1;
    }
    k
}

/// Default sieve sizes: `K = max(r1 + 1, ⌈n^{1/3}⌉)` capped at `n / 5`, and
/// `L` the smallest complete total-degree count over `r1 + r2` inputs that
/// is at least `K`.
pub fn default_dims(n: usize, r1: usize, r2: usize) -> (usize, usize) {
    let k = (r1 + 1).max(ceil_cbrt(n)).min((n / 5).max(1));
    let l = make_basis_spec(r1 + r2, k, &[])
        .map(|s| s.target_dim())
        .unwrap_or(k);
    (k, l)
}

/// Builds the spec for `points`, clamping the hint to what the data's degree
/// caps can support.
pub fn spec_for_data(points: &DMatrix<f64>, hint: usize) -> Result<BasisSpec, BasisError> {
    let caps = degree_caps_for(points);
    let hint = match max_admissible(points.ncols(), &caps) {
        Some(max) => hint.min(max),
        None => hint,
    };
    make_basis_spec(points.ncols(), hint.max(1), &caps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn univariate_count() {
        let s = make_basis_spec(1, 3, &[]).unwrap();
        assert_eq!(s.target_dim(), 3);
        assert_eq!(s.multi_indices(), &[vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn bivariate_total_degree_two() {
        let s = make_basis_spec(2, 4, &[]).unwrap();
        assert_eq!(s.target_dim(), 6);
        assert_eq!(s.max_total_degree(), 2);
        assert_eq!(
            s.multi_indices(),
            &[
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn caps_can_make_hint_infeasible() {
        assert_eq!(
            make_basis_spec(1, 5, &[1]),
            Err(BasisError::InfeasibleDim { hint: 5, max: 2 })
        );
    }

    #[test]
    fn caps_limit_indices() {
        let s = make_basis_spec(2, 12, &[2, 3]).unwrap();
        assert_eq!(s.target_dim(), 12);
        assert_eq!(s.max_total_degree(), 5);
        assert!(s.multi_indices().iter().all(|a| a[0] <= 2 && a[1] <= 3));
        assert_eq!(max_admissible(2, &[2, 3]), Some(12));
        assert_eq!(max_admissible(2, &[]), None);
    }

    #[test]
    fn legendre_values() {
        let p = legendre_orthonormal(2, 0.0);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 5f64.sqrt() * -0.5).abs() < 1e-15);
        let p = legendre_orthonormal(1, 1.0);
        assert!((p[1] - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn eval_rejects_out_of_range() {
        let s = make_basis_spec(1, 2, &[]).unwrap();
        let pts = DMatrix::from_column_slice(2, 1, &[0.5, 1.1]);
        assert!(matches!(
            eval_basis(&s, &pts),
            Err(BasisError::PointOutOfRange { row: 1, col: 0, .. })
        ));
        let pts = DMatrix::from_column_slice(1, 1, &[1.0 + 1e-12]);
        assert!(eval_basis(&s, &pts).is_ok());
    }

    #[test]
    fn constant_column_first() {
        let s = make_basis_spec(3, 10, &[]).unwrap();
        let pts = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64 / 21.0) * 2.0 - 1.0);
        let b = eval_basis(&s, &pts).unwrap();
        assert!(b.values.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn default_dims_examples() {
        assert_eq!(default_dims(1000, 2, 1).0, 10);
        assert!(default_dims(1000, 2, 1).1 >= 10);
        let (k, _) = default_dims(20, 1, 1);
        assert!(k <= 4);
        assert_eq!(default_dims(125, 1, 1).0, 5);
        assert_eq!(ceil_cbrt(1000), 10);
        assert_eq!(ceil_cbrt(1001), 11);
        assert_eq!(ceil_cbrt(1), 1);
    }

    #[test]
    fn binary_column_capped_at_one() {
        let pts = DMatrix::from_column_slice(4, 2, &[-1.0, 1.0, 1.0, -1.0, 0.1, 0.2, 0.3, 0.4]);
        assert_eq!(degree_caps_for(&pts), vec![1, 3]);
    }
}
