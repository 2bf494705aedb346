//! Command-line syntax.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mediate_calib::calib::RhoFamily;

use crate::config::{load_file_config, FileConfig, Overrides, RunConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mediate-calib", version, about = "Causal mediation analysis with calibration weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate mediation effects from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a synthetic data-generating process.
    Simulate(SimulateArgs),
    /// Verify the built-in generator families.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RhoArg {
    Et,
    El,
    Cue,
}

impl RhoArg {
    fn name(self) -> &'static str {
        match self {
            RhoArg::Et => "et",
            RhoArg::El => "el",
            RhoArg::Cue => "cue",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Table,
}

impl FormatArg {
    fn name(self) -> &'static str {
        match self {
            FormatArg::Json => "json",
            FormatArg::Table => "table",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator family.
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Covariate basis size K, or `auto`.
    #[arg(long)]
    pub basis_dim: Option<String>,
    /// Mediator basis size L, or `auto`.
    #[arg(long)]
    pub mediator_basis_dim: Option<String>,
    /// Confidence level in (0, 1).
    #[arg(long)]
    pub level: Option<f64>,
    /// Comma-separated subset of nie,nde,pie,ndeu,multimediator, or `all`.
    #[arg(long)]
    pub estimands: Option<String>,
    /// Base seed for simulation replications.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for simulation replications.
    #[arg(long, env = "MEDIATE_CALIB_THREADS")]
    pub threads: Option<usize>,
    /// Output file (written atomically); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Binary (0/1) treatment column.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Mediator column(s), comma-separated.
    #[arg(long)]
    pub mediator: Option<String>,
    /// Prior mediator column(s), comma-separated.
    #[arg(long)]
    pub prior_mediator: Option<String>,
    /// Outcome column.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Covariate column(s), comma-separated.
    #[arg(long)]
    pub covariates: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// Sample size per replication.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of Monte Carlo replications (at least 2).
    #[arg(long)]
    pub replications: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Family to check, or `all`.
    #[arg(long, default_value = "all")]
    pub rho: String,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            rho: self.rho.map(|r| r.name().to_string()),
            basis_dim: self.basis_dim.clone(),
            mediator_basis_dim: self.mediator_basis_dim.clone(),
            level: self.level,
            estimands: self.estimands.clone(),
            seed: self.seed,
            threads: self.threads,
            output: self.output.clone(),
            format: self.format.map(|f| f.name().to_string()),
            ..Overrides::default()
        }
    }

    fn file(&self) -> Result<FileConfig, CliError> {
        match &self.config {
            Some(p) => load_file_config(p),
            None => Ok(FileConfig::default()),
        }
    }
}

impl EstimateArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let flags = Overrides {
            input: self.input.clone(),
            treatment: self.treatment.clone(),
            mediator: self.mediator.clone(),
            prior_mediator: self.prior_mediator.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
            ..self.common.overrides()
        };
        RunConfig::resolve(&self.common.file()?, &flags)
    }
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let flags = Overrides {
            n: self.n,
            replications: self.replications,
            ..self.common.overrides()
        };
        RunConfig::resolve(&self.common.file()?, &flags)
    }
}

impl CheckArgs {
    pub fn families(&self) -> Result<Vec<RhoFamily>, CliError> {
        if self.rho.eq_ignore_ascii_case("all") {
            return Ok(RhoFamily::ALL.to_vec());
        }
        self.rho
            .parse::<RhoFamily>()
            .map(|r| vec![r])
            .map_err(|_| CliError::Usage(format!("unknown rho family `{}` (expected et, el, cue or all)", self.rho)))
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let flags = Overrides {
            output: self.output.clone(),
            format: self.format.map(|f| f.name().to_string()),
            ..Overrides::default()
        };
        RunConfig::resolve(&FileConfig::default(), &flags)
    }
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    use crate::commands::{run_check, run_estimate, run_simulate};
    match &cli.command {
        Command::Estimate(a) => run_estimate(&a.resolve()?),
        Command::Simulate(a) => run_simulate(&a.resolve()?),
        Command::Check(a) => run_check(&a.resolve()?, &a.families()?),
    }
}
