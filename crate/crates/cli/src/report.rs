//! Report types, their JSON and table renderings, and atomic output.
//!
//! Every float goes through [`R12`], which rounds to 12 significant digits,
//! so identical runs produce byte-identical JSON.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// A float serialized with 12 significant digits; non-finite values become
/// `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R12(pub f64);

impl R12 {
    pub fn rounded(self) -> f64 {
        round12(self.0)
    }
}

pub fn round12(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.11e}").parse().expect("formatted float parses")
}

impl Serialize for R12 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            // Normalize −0 so it prints like 0.
            s.serialize_f64(self.rounded() + 0.0)
        } else {
            s.serialize_none()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateEntry {
    pub name: String,
    pub estimate: R12,
    pub std_error: R12,
    pub ci_lower: R12,
    pub ci_upper: R12,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightEntry {
    pub kind: String,
    pub converged: bool,
    pub iterations: usize,
    pub balance_residual: R12,
    pub min_weight: R12,
    pub max_weight: R12,
    pub weight_sum: R12,
    pub negative_weights: usize,
    pub ridge: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DimsEntry {
    pub k: usize,
    pub l: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_prior: Option<usize>,
    pub k_requested: String,
    pub l_requested: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionEntry {
    pub block: String,
    pub condition: R12,
    pub ridged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceEntry {
    /// `V̂` for `(δ₁, δ₀, θ₀)`.
    pub vhat: Vec<Vec<R12>>,
    pub min_eigenvalue: R12,
    pub positive_semidefinite: bool,
    pub conditions: Vec<ConditionEntry>,
}

/// Output of `estimate`.
#[derive(Debug, Clone, Serialize)]
pub struct MediationReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: String,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub rho: String,
    pub level: R12,
    pub dims: DimsEntry,
    pub estimates: Vec<EstimateEntry>,
    pub variance: VarianceEntry,
    pub weights: Vec<WeightEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationRow {
    pub name: String,
    pub truth: R12,
    pub mean_estimate: R12,
    pub bias: R12,
    pub mc_sd: R12,
    pub mean_se: R12,
    pub coverage: R12,
    /// `sqrt(E[S²] / n)` when the DGP is discrete.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_se: Option<R12>,
}

/// Output of `simulate`.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub dgp: String,
    pub n: usize,
    pub replications: usize,
    pub failed_replications: usize,
    pub seed: u64,
    pub rho: String,
    pub level: R12,
    pub rows: Vec<SimulationRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub rho: String,
    pub name: String,
    pub passed: bool,
    pub worst: R12,
    pub detail: String,
}

/// Output of `check`.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub passed: bool,
    pub checks: Vec<CheckEntry>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn num(v: R12) -> String {
    if v.0.is_finite() {
        format!("{:.6}", v.rounded())
    } else {
        "NA".into()
    }
}

impl MediationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Causal mediation analysis: {} (n = {}, treated = {}, control = {})",
            self.input, self.n, self.n_treated, self.n_control
        );
        let _ = writeln!(
            s,
            "rho = {}, K = {}, L = {}{}, {:.0}% confidence intervals",
            self.rho,
            self.dims.k,
            self.dims.l,
            self.dims.l_prior.map(|l| format!(", L(prior) = {l}")).unwrap_or_default(),
            100.0 * self.level.0
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>14} {:>14}",
            "estimand", "estimate", "std.error", "ci.lower", "ci.upper"
        );
        for e in &self.estimates {
            let _ = writeln!(
                s,
                "{:<10} {:>14} {:>14} {:>14} {:>14}",
                e.name,
                num(e.estimate),
                num(e.std_error),
                num(e.ci_lower),
                num(e.ci_upper)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>12} {:>12} {:>12} {:>8}",
            "weights", "iter", "converged", "balance", "min", "max", "negative"
        );
        for w in &self.weights {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>10} {:>12.3e} {:>12.6} {:>12.6} {:>8}",
                w.kind,
                w.iterations,
                if w.converged { "yes" } else { "no" },
                w.balance_residual.rounded(),
                w.min_weight.rounded(),
                w.max_weight.rounded(),
                w.negative_weights
            );
        }
        if !self.variance.positive_semidefinite {
            let _ = writeln!(s, "\nwarning: variance matrix is not positive semidefinite");
        }
        s
    }
}

impl SimulationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Simulation: {} (n = {}, replications = {}, failed = {}, seed = {}, rho = {})",
            self.dgp, self.n, self.replications, self.failed_replications, self.seed, self.rho
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>12}",
            "estimand", "truth", "mean", "bias", "mc.sd", "mean.se", "coverage", "oracle.se"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10.3} {:>12}",
                r.name,
                num(r.truth),
                num(r.mean_estimate),
                num(r.bias),
                num(r.mc_sd),
                num(r.mean_se),
                r.coverage.rounded(),
                r.oracle_se.map(num).unwrap_or_else(|| "-".into())
            );
        }
        s
    }
}

impl CheckReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<4} {:<24} {:<4} {}",
                c.rho,
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.detail
            );
        }
        let _ = writeln!(s, "{}", if self.passed { "all checks passed" } else { "some checks failed" });
        s
    }
}

/// Writes `text` to `path` through a temporary file in the same directory
/// and an atomic rename, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let Some(path) = path else {
        let mut out = std::io::stdout().lock();
        return out
            .write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Output(e.to_string()));
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let err = |e: std::io::Error| CliError::Output(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(text.as_bytes()).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}
