//! Run configuration: a TOML file merged with command-line overrides.
//! Precedence is flag > file > default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mediate_calib::calib::{RhoFamily, SolverOptions};
use mediate_calib::dataset::{ColumnRole, Role};
use mediate_calib::mediation::MediationConfig;
use mediate_calib::oracle::DgpSpec;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SIM_N: usize = 1000;
pub const DEFAULT_REPLICATIONS: usize = 200;

/// A basis dimension: chosen from the sample size, or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dim {
    #[default]
    Auto,
    Fixed(usize),
}

impl Dim {
    pub fn value(self) -> Option<usize> {
        match self {
            Dim::Auto => None,
            Dim::Fixed(k) => Some(k),
        }
    }
}

impl FromStr for Dim {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Dim::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Dim::Fixed(k)),
            _ => Err(CliError::Config(format!("basis dimension must be `auto` or an integer >= 1, got `{s}`"))),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Auto => f.write_str("auto"),
            Dim::Fixed(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Json,
}

impl FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "table" => Ok(Format::Table),
            "json" => Ok(Format::Json),
            other => Err(CliError::Config(format!("format must be `json` or `table`, got `{other}`"))),
        }
    }
}

/// Which effect contrasts to compute and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimandSelection {
    pub nie: bool,
    pub nde: bool,
    pub pie: bool,
    pub ndeu: bool,
    pub multimediator: bool,
}

impl Default for EstimandSelection {
    fn default() -> Self {
        Self::ALL
    }
}

impl EstimandSelection {
    pub const ALL: Self = Self {
        nie: true,
        nde: true,
        pie: true,
        ndeu: true,
        multimediator: true,
    };
    pub const NAMES: [&'static str; 5] = ["nie", "nde", "pie", "ndeu", "multimediator"];

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, CliError> {
        let mut sel = Self {
            nie: false,
            nde: false,
            pie: false,
            ndeu: false,
            multimediator: false,
        };
        if names.is_empty() {
            return Err(CliError::Config("estimand list is empty".into()));
        }
        for name in names {
            match name.as_ref().trim() {
                "all" => sel = Self::ALL,
                "nie" => sel.nie = true,
                "nde" => sel.nde = true,
                "pie" => sel.pie = true,
                "ndeu" => sel.ndeu = true,
                "multimediator" => sel.multimediator = true,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown estimand `{other}` (expected one of {}, all)",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(sel)
    }

    /// Whether a report row of this name is selected. Potential-outcome
    /// means and the ATE are always reported.
    pub fn shows(&self, row: &str) -> bool {
        match row {
            "nie" => self.nie,
            "nde" => self.nde,
            "pie" => self.pie,
            "ndeu" => self.ndeu,
            "theta_w" | "path_w" | "path_m" | "direct" => self.multimediator,
            _ => true,
        }
    }
}

/// Splits a comma-separated column list. Entries are trimmed; empty entries
/// and duplicates are rejected.
pub fn parse_column_list(s: &str) -> Result<Vec<String>, CliError> {
    let mut out: Vec<String> = Vec::new();
    for part in s.split(',') {
        let name = part.trim();
        if name.is_empty() {
            return Err(CliError::Config(format!("empty entry in column list `{s}`")));
        }
        if out.iter().any(|o| o == name) {
            return Err(CliError::Config(format!("column `{name}` is listed twice")));
        }
        out.push(name.to_string());
    }
    Ok(out)
}

/// A list given either as an array or as one comma-separated string.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ListValue {
    One(String),
    Many(Vec<String>),
}

impl ListValue {
    fn resolve(&self) -> Result<Vec<String>, CliError> {
        match self {
            ListValue::One(s) => parse_column_list(s),
            ListValue::Many(v) => parse_column_list(&v.join(",")),
        }
    }
}

/// `auto` or a number in the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum DimValue {
    Number(i64),
    Text(String),
}

impl DimValue {
    fn resolve(&self) -> Result<Dim, CliError> {
        match self {
            DimValue::Number(k) if *k >= 1 => Ok(Dim::Fixed(*k as usize)),
            DimValue::Number(k) => Err(CliError::Config(format!("basis dimension must be >= 1, got {k}"))),
            DimValue::Text(s) => s.parse(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnsFile {
    pub treatment: Option<String>,
    pub mediator: Option<ListValue>,
    pub prior_mediator: Option<ListValue>,
    pub outcome: Option<String>,
    pub covariates: Option<ListValue>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub dgp: Option<DgpSpec>,
}

/// The config file as written.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub rho: Option<String>,
    pub basis_dim: Option<DimValue>,
    pub mediator_basis_dim: Option<DimValue>,
    pub level: Option<f64>,
    pub estimands: Option<ListValue>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
    pub columns: Option<ColumnsFile>,
    pub simulation: Option<SimulationFile>,
}

pub fn parse_file_config(text: &str) -> Result<FileConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    parse_file_config(&text)
}

/// Values given on the command line; `None` defers to the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub treatment: Option<String>,
    pub mediator: Option<String>,
    pub prior_mediator: Option<String>,
    pub outcome: Option<String>,
    pub covariates: Option<String>,
    pub rho: Option<String>,
    pub basis_dim: Option<String>,
    pub mediator_basis_dim: Option<String>,
    pub level: Option<f64>,
    pub estimands: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
    pub n: Option<usize>,
    pub replications: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Columns {
    pub treatment: Option<String>,
    pub mediators: Vec<String>,
    pub prior_mediators: Vec<String>,
    pub outcome: Option<String>,
    pub covariates: Vec<String>,
}

impl Columns {
    /// The CSV schema; errors when a required role is missing.
    pub fn schema(&self) -> Result<Vec<ColumnRole>, CliError> {
        let treatment = self
            .treatment
            .as_ref()
            .ok_or_else(|| CliError::Config("no treatment column given (--treatment)".into()))?;
        let outcome = self
            .outcome
            .as_ref()
            .ok_or_else(|| CliError::Config("no outcome column given (--outcome)".into()))?;
        if self.mediators.is_empty() {
            return Err(CliError::Config("no mediator column given (--mediator)".into()));
        }
        if self.covariates.is_empty() {
            return Err(CliError::Config("no covariate columns given (--covariates)".into()));
        }
        let mut schema = vec![ColumnRole::new(Role::Treatment, treatment)];
        schema.extend(self.mediators.iter().map(|m| ColumnRole::new(Role::Mediator, m)));
        schema.extend(
            self.prior_mediators
                .iter()
                .map(|w| ColumnRole::new(Role::CausallyPriorMediator, w)),
        );
        schema.push(ColumnRole::new(Role::Outcome, outcome));
        schema.extend(self.covariates.iter().map(|x| ColumnRole::new(Role::Covariate, x)));
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub n: usize,
    pub replications: usize,
    pub dgp: DgpSpec,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub columns: Columns,
    pub rho: RhoFamily,
    pub basis_dim: Dim,
    pub mediator_basis_dim: Dim,
    pub level: f64,
    pub estimands: EstimandSelection,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub simulation: SimulationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            columns: Columns::default(),
            rho: RhoFamily::default(),
            basis_dim: Dim::Auto,
            mediator_basis_dim: Dim::Auto,
            level: DEFAULT_LEVEL,
            estimands: EstimandSelection::ALL,
            seed: 0,
            threads: None,
            output: None,
            format: Format::Table,
            simulation: SimulationSettings {
                n: DEFAULT_SIM_N,
                replications: DEFAULT_REPLICATIONS,
                dgp: DgpSpec::default(),
            },
        }
    }
}

fn parse_rho(s: &str) -> Result<RhoFamily, CliError> {
    s.parse::<RhoFamily>()
        .map_err(|_| CliError::Config(format!("unknown rho family `{s}` (expected et, el or cue)")))
}

impl RunConfig {
    /// Merges `file` and `flags` over the defaults and validates the result.
    pub fn resolve(file: &FileConfig, flags: &Overrides) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let cols = file.columns.clone().unwrap_or_default();
        let sim = file.simulation.clone().unwrap_or_default();

        c.input = flags.input.clone().or_else(|| file.input.clone());
        c.output = flags.output.clone().or_else(|| file.output.clone());
        c.columns.treatment = flags.treatment.clone().or(cols.treatment);
        c.columns.outcome = flags.outcome.clone().or(cols.outcome);
        let list = |flag: &Option<String>, file: &Option<ListValue>| -> Result<Vec<String>, CliError> {
            match (flag, file) {
                (Some(s), _) => parse_column_list(s),
                (None, Some(v)) => v.resolve(),
                (None, None) => Ok(Vec::new()),
            }
        };
        c.columns.mediators = list(&flags.mediator, &cols.mediator)?;
        c.columns.prior_mediators = list(&flags.prior_mediator, &cols.prior_mediator)?;
        c.columns.covariates = list(&flags.covariates, &cols.covariates)?;

        if let Some(r) = flags.rho.as_deref().or(file.rho.as_deref()) {
            c.rho = parse_rho(r)?;
        }
        c.basis_dim = match (&flags.basis_dim, &file.basis_dim) {
            (Some(s), _) => s.parse()?,
            (None, Some(v)) => v.resolve()?,
            (None, None) => Dim::Auto,
        };
        c.mediator_basis_dim = match (&flags.mediator_basis_dim, &file.mediator_basis_dim) {
            (Some(s), _) => s.parse()?,
            (None, Some(v)) => v.resolve()?,
            (None, None) => Dim::Auto,
        };
        c.level = flags.level.or(file.level).unwrap_or(DEFAULT_LEVEL);
        if !(c.level > 0.0 && c.level < 1.0) {
            return Err(CliError::Config(format!("confidence level must lie in (0, 1), got {}", c.level)));
        }
        c.estimands = match (&flags.estimands, &file.estimands) {
            (Some(s), _) => EstimandSelection::from_names(&s.split(',').collect::<Vec<_>>())?,
            (None, Some(v)) => EstimandSelection::from_names(&v.resolve()?)?,
            (None, None) => EstimandSelection::ALL,
        };
        c.seed = flags.seed.or(file.seed).unwrap_or(0);
        c.threads = flags.threads.or(file.threads);
        if c.threads == Some(0) {
            return Err(CliError::Config("thread count must be >= 1".into()));
        }
        if let Some(f) = flags.format.as_deref().or(file.format.as_deref()) {
            c.format = f.parse()?;
        }
        c.simulation.n = flags.n.or(sim.n).unwrap_or(DEFAULT_SIM_N);
        c.simulation.replications = flags.replications.or(sim.replications).unwrap_or(DEFAULT_REPLICATIONS);
        if let Some(d) = sim.dgp {
            c.simulation.dgp = d;
        }
        Ok(c)
    }

    pub fn mediation_config(&self) -> MediationConfig {
        MediationConfig {
            rho: self.rho,
            basis_dim: self.basis_dim.value(),
            mediator_basis_dim: self.mediator_basis_dim.value(),
            solver: SolverOptions::default(),
            ndeu: self.estimands.ndeu,
            multimediator: self.estimands.multimediator,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let file = parse_file_config("rho = \"el\"\nlevel = 0.9\nseed = 4\n").unwrap();
        let flags = Overrides {
            rho: Some("cue".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&file, &flags).unwrap();
        assert_eq!(c.rho, RhoFamily::ContinuousUpdating);
        assert_eq!(c.level, 0.9);
        assert_eq!(c.seed, 4);
        assert_eq!(c.basis_dim, Dim::Auto);
    }

    #[test]
    fn columns_accept_strings_and_arrays() {
        let file = parse_file_config(
            "[columns]\ntreatment = \"t\"\nmediator = [\"m1\", \"m2\"]\noutcome = \"y\"\ncovariates = \"x1, x2\"\n",
        )
        .unwrap();
        let c = RunConfig::resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(c.columns.mediators, ["m1", "m2"]);
        assert_eq!(c.columns.covariates, ["x1", "x2"]);
        assert_eq!(c.columns.schema().unwrap().len(), 6);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = |text: &str| RunConfig::resolve(&parse_file_config(text).unwrap(), &Overrides::default());
        assert!(bad("level = 1.0").is_err());
        assert!(bad("basis_dim = 0").is_err());
        assert!(bad("basis_dim = \"many\"").is_err());
        assert!(bad("estimands = [\"nie\", \"bogus\"]").is_err());
        assert!(parse_file_config("unknown_key = 1").is_err());
        assert_eq!(
            RunConfig::resolve(&parse_file_config("basis_dim = \"auto\"\nmediator_basis_dim = 12").unwrap(), &Overrides::default())
                .unwrap()
                .mediator_basis_dim,
            Dim::Fixed(12)
        );
    }

    #[test]
    fn column_lists() {
        assert_eq!(parse_column_list(" a ,b").unwrap(), ["a", "b"]);
        assert!(parse_column_list("a,,b").is_err());
        assert!(parse_column_list("a,a").is_err());
    }

    #[test]
    fn dgp_spec_from_file() {
        let file = parse_file_config(
            "[simulation]\nn = 500\nreplications = 10\n[simulation.dgp]\nfamily = \"random_discrete\"\nseed = 3\nnull = \"mediator_unaffected\"\n",
        )
        .unwrap();
        let c = RunConfig::resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(c.simulation.n, 500);
        assert!(matches!(c.simulation.dgp, DgpSpec::RandomDiscrete { seed: 3, .. }));
    }
}
