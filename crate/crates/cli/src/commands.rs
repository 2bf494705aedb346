//! The three subcommands. Each builds a report; [`run_estimate`] and friends
//! also render it and write it out.

use mediate_calib::calib::{run_checks, CalibrationResult, ConcaveGenerator, RhoFamily};
use mediate_calib::dataset::load_csv;
use mediate_calib::mediation::{fit, MediationFit};
use mediate_calib::oracle::{replication_rng, DgpSpec, Estimand};
use mediate_calib::variance::{analyze, EstimateRow};
use rayon::prelude::*;

use crate::config::{Format, RunConfig};
use crate::report::{
    to_json, write_output, CheckEntry, CheckReport, ConditionEntry, DimsEntry, EstimateEntry, MediationReport,
    SimulationReport, SimulationRow, VarianceEntry, WeightEntry, R12, SCHEMA_VERSION,
};
use crate::CliError;

/// Report order of the estimand rows.
pub const ROW_ORDER: [&str; 13] = [
    "ate", "nie", "nde", "pie", "ndeu", "delta1", "delta0", "theta0", "theta1", "theta_w", "path_w", "path_m",
    "direct",
];

fn entry(r: &EstimateRow) -> EstimateEntry {
    EstimateEntry {
        name: r.name.clone(),
        estimate: R12(r.estimate),
        std_error: R12(r.std_error),
        ci_lower: R12(r.ci_lower),
        ci_upper: R12(r.ci_upper),
    }
}

fn weight_entry(label: &str, r: &CalibrationResult) -> WeightEntry {
    WeightEntry {
        kind: label.to_string(),
        converged: r.converged,
        iterations: r.iterations,
        balance_residual: R12(r.balance_residual_inf),
        min_weight: R12(r.diagnostics.min),
        max_weight: R12(r.diagnostics.max),
        weight_sum: R12(r.diagnostics.sum),
        negative_weights: r.diagnostics.negative_count,
        ridge: r.ridge_on_final,
    }
}

/// Estimate rows for `fitted`, selected and ordered for reporting.
fn report_rows(config: &RunConfig, fitted: &MediationFit) -> Result<(Vec<EstimateRow>, VarianceEntry), CliError> {
    let var = analyze(fitted, config.level)?;
    let rows = ROW_ORDER
        .iter()
        .filter(|name| config.estimands.shows(name))
        .filter_map(|name| var.row(name).cloned())
        .collect();
    let v = &var.vhat;
    let variance = VarianceEntry {
        vhat: (0..3).map(|i| (0..3).map(|j| R12(v.vhat[(i, j)])).collect()).collect(),
        min_eigenvalue: R12(v.min_eigenvalue),
        positive_semidefinite: v.positive_semidefinite,
        conditions: v
            .conditions
            .iter()
            .map(|c| ConditionEntry {
                block: c.block.to_string(),
                condition: R12(c.condition),
                ridged: c.ridged,
            })
            .collect(),
    };
    Ok((rows, variance))
}

pub fn estimate_report(config: &RunConfig) -> Result<MediationReport, CliError> {
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("estimate needs an input file (--input)".into()))?;
    let schema = config.columns.schema()?;
    let data = load_csv(input, &schema)?;
    let fitted = fit(&data, &config.mediation_config())?;
    let (rows, variance) = report_rows(config, &fitted)?;
    let f = &fitted.fits;
    let mut weights = vec![
        weight_entry("fit_p", &f.p),
        weight_entry("fit_q", &f.q),
        weight_entry("fit_r", &f.r),
        weight_entry("fit_w", &f.w),
    ];
    if let Some(r) = &f.r_tilde {
        weights.push(weight_entry("fit_r_tilde", r));
    }
    if let Some(r) = &f.r_prior {
        weights.push(weight_entry("fit_r_prior", r));
    }
    let d = &fitted.dims;
    Ok(MediationReport {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        input: input.display().to_string(),
        n: data.n(),
        n_treated: data.n_treated(),
        n_control: data.n_control(),
        rho: config.rho.to_string(),
        level: R12(config.level),
        dims: DimsEntry {
            k: d.k,
            l: d.l,
            l_prior: d.l_prior,
            k_requested: config.basis_dim.to_string(),
            l_requested: config.mediator_basis_dim.to_string(),
        },
        estimates: rows.iter().map(entry).collect(),
        variance,
        weights,
    })
}

fn dgp_label(spec: &DgpSpec) -> String {
    match spec {
        DgpSpec::RandomDiscrete {
            seed,
            prior_mediator,
            null,
        } => {
            let mut s = format!("random_discrete(seed={seed}");
            if *prior_mediator {
                s.push_str(", prior_mediator");
            }
            if let Some(n) = null {
                s.push_str(&format!(", null={}", serde_json::to_value(n).unwrap().as_str().unwrap_or("?")));
            }
            s.push(')');
            s
        }
        DgpSpec::Discrete(_) => "discrete".into(),
        DgpSpec::LinearNormal(_) => "linear_normal".into(),
    }
}

type Replication = Vec<(String, f64, f64, bool)>;

pub fn simulate_report(config: &RunConfig) -> Result<SimulationReport, CliError> {
    let sim = &config.simulation;
    if sim.replications < 2 {
        return Err(CliError::Usage(format!(
            "simulate needs at least 2 replications, got {}",
            sim.replications
        )));
    }
    if sim.n < 2 {
        return Err(CliError::Usage(format!("simulate needs n >= 2, got {}", sim.n)));
    }
    let dgp = sim.dgp.build()?;
    let truth = dgp.true_values();
    let oracle = dgp.true_influence_variance().ok();
    let mediation = config.mediation_config();

    let run_one = |rep: u64| -> Result<Replication, CliError> {
        let mut rng = replication_rng(config.seed, rep);
        let data = dgp.sample_with(sim.n, &mut rng)?;
        let fitted = fit(&data, &mediation)?;
        let (rows, _) = report_rows(config, &fitted)?;
        Ok(rows
            .into_iter()
            .filter_map(|r| {
                let t = Estimand::from_name(&r.name)?.of(&truth)?;
                let covers = r.covers(t);
                Some((r.name, r.estimate, r.std_error, covers))
            })
            .collect())
    };
    let reps = sim.replications as u64;
    let results: Vec<Result<Replication, CliError>> = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(|| (0..reps).into_par_iter().map(run_one).collect()),
        None => (0..reps).into_par_iter().map(run_one).collect(),
    };

    let mut ok = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let failed = sim.replications - ok.len();
    if ok.len() < 2 {
        return Err(first_err.unwrap_or_else(|| CliError::Usage("too few successful replications".into())));
    }

    let names: Vec<String> = ok[0].iter().map(|r| r.0.clone()).collect();
    let mut rows = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let est = Estimand::from_name(name).expect("row names are estimands");
        let t = est.of(&truth).expect("truth present");
        let vals: Vec<(f64, f64, bool)> = ok
            .iter()
            .filter_map(|r| r.get(k).filter(|x| &x.0 == name).map(|x| (x.1, x.2, x.3)))
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().map(|v| v.0).sum::<f64>() / m;
        let sd = (vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        rows.push(SimulationRow {
            name: name.clone(),
            truth: R12(t),
            mean_estimate: R12(mean),
            bias: R12(mean - t),
            mc_sd: R12(sd),
            mean_se: R12(vals.iter().map(|v| v.1).sum::<f64>() / m),
            coverage: R12(vals.iter().filter(|v| v.2).count() as f64 / m),
            oracle_se: oracle
                .as_ref()
                .and_then(|o| o.get(est))
                .map(|v| R12((v / sim.n as f64).sqrt())),
        });
    }
    Ok(SimulationReport {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        dgp: dgp_label(&sim.dgp),
        n: sim.n,
        replications: sim.replications,
        failed_replications: failed,
        seed: config.seed,
        rho: config.rho.to_string(),
        level: R12(config.level),
        rows,
    })
}

/// Self-checks for arbitrary generators; `check` uses the built-in families.
pub fn check_report_for(generators: &[&dyn ConcaveGenerator]) -> CheckReport {
    let mut checks = Vec::new();
    for g in generators {
        for c in run_checks(*g) {
            checks.push(CheckEntry {
                rho: g.name().to_string(),
                name: c.name.to_string(),
                passed: c.passed,
                worst: R12(c.worst),
                detail: c.detail,
            });
        }
    }
    CheckReport {
        schema_version: SCHEMA_VERSION,
        command: "check",
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

pub fn check_report(families: &[RhoFamily]) -> CheckReport {
    let gens: Vec<&dyn ConcaveGenerator> = families.iter().map(|f| f as &dyn ConcaveGenerator).collect();
    check_report_for(&gens)
}

fn render<T: serde::Serialize>(format: Format, value: &T, table: impl FnOnce(&T) -> String) -> String {
    match format {
        Format::Json => to_json(value),
        Format::Table => table(value),
    }
}

pub fn run_estimate(config: &RunConfig) -> Result<(), CliError> {
    let report = estimate_report(config)?;
    let text = render(config.format, &report, MediationReport::to_table);
    write_output(config.output.as_deref(), &text)
}

pub fn run_simulate(config: &RunConfig) -> Result<(), CliError> {
    let report = simulate_report(config)?;
    let text = render(config.format, &report, SimulationReport::to_table);
    write_output(config.output.as_deref(), &text)
}

/// Writes the report, then fails if any check failed.
pub fn run_check(config: &RunConfig, families: &[RhoFamily]) -> Result<(), CliError> {
    let report = check_report(families);
    let text = render(config.format, &report, CheckReport::to_table);
    write_output(config.output.as_deref(), &text)?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}:{}", c.rho, c.name))
            .collect();
        Err(CliError::CheckFailed(format!("failed checks: {}", failed.join(", "))))
    }
}
