use std::fs;
use std::path::Path;

use harmonize_core::data::{compute_design_counts, load_dataset, load_pool, OutcomeFamily, PrevalenceSource, Study};
use harmonize_core::harmonize::Lambda;
use harmonize_core::intervals::{IntervalMethod, IntervalSet};
use harmonize_core::pipeline::{evaluate, harmonized_detail, interval, EstimatorSpec, PipelineContext};
use harmonize_core::sim::report::{write_replicates_csv, write_report_csv, write_report_json};
use harmonize_core::sim::rng::{stream_key, StreamRole};
use harmonize_core::sim::{
    preset, run_monte_carlo, run_resampling, synthesize_pools, MonteCarloConfig, MonteCarloReport, Preset,
    ResampleConfig, ScenarioSpec,
};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{EstimateConfig, ResampleCliConfig, SimulateConfig};
use crate::error::CliError;

/// Relative tolerance for the fully harmonized constraint πᵀθ̂ʰ = θ̂ʳ.
const FULL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Serialize)]
struct FullCheck {
    estimator: String,
    weighted_sum: f64,
    overall: f64,
    gap: f64,
    satisfied: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a C,
    #[serde(skip_serializing_if = "Value::is_null")]
    details: Value,
    outputs: Vec<&'static str>,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &'static str,
    config: &C,
    details: Value,
    outputs: Vec<&'static str>,
) -> Result<(), CliError> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        details,
        outputs,
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(harmonize_core::error::HarmonizeError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(output_err(path))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(output_err(dir))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let f = fs::File::create(path).map_err(output_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Output {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn check_prior(variance: f64) -> Result<(), CliError> {
    if variance.is_finite() && variance > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("cut_prior_variance must be positive, got {variance}")))
    }
}

fn check_workers(workers: usize) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing config key {key:?}")))
}

pub fn estimate(cfg: &mut EstimateConfig) -> Result<(), CliError> {
    check_alpha(cfg.alpha)?;
    check_prior(cfg.cut_prior_variance)?;
    check_workers(cfg.workers)?;
    let mut estimators = cfg.estimators.clone();
    estimators.extend(cfg.harmonization.estimators()?);
    let schema = required(&cfg.schema, "schema")?;
    let rct = required(&cfg.rct, "rct")?;
    let ec = required(&cfg.ec, "ec")?;
    let ds = load_dataset(rct, ec, schema)?;
    info!("loaded {} trial and {} external records", ds.rct().len(), ds.ec().len());

    let intervals = cfg.intervals.get_or_insert_with(|| match ds.family() {
        OutcomeFamily::Continuous => vec![IntervalMethod::Analytic, IntervalMethod::RctOnly],
        OutcomeFamily::Binary => vec![IntervalMethod::RctOnly],
    });
    let intervals = intervals.clone();
    let ctx = PipelineContext {
        prevalence: match &cfg.prevalence {
            Some(p) => PrevalenceSource::UserSupplied(p.clone()),
            None => PrevalenceSource::RctEmpirical,
        },
        mu_true: None,
        cut_prior_variance: cfg.cut_prior_variance,
    };
    let counts = compute_design_counts(&ds, &ctx.prevalence)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let (values, checks, sets) = pool.install(|| -> Result<_, CliError> {
        let mut values = Vec::new();
        let mut checks = Vec::new();
        for e in &estimators {
            let full = matches!(e, EstimatorSpec::Harmonized { lambda: Lambda::Full, .. } | EstimatorSpec::HarmonizedIpw { .. });
            let v = if full {
                let out = harmonized_detail(&ds, e, &ctx)?;
                let weighted_sum = out.pi.dot(&out.estimate);
                let gap = (weighted_sum - out.theta_r).abs();
                checks.push(FullCheck {
                    estimator: e.label(),
                    weighted_sum,
                    overall: out.theta_r,
                    gap,
                    satisfied: gap <= FULL_TOLERANCE * out.theta_r.abs().max(1.0),
                });
                out.estimate
            } else {
                evaluate(&ds, e, &ctx)?
            };
            values.push((e.label(), v));
        }
        let centre = estimators.iter().find(|e| e.is_harmonized());
        let key = stream_key(cfg.seed, 0, StreamRole::Bootstrap, 0);
        let sets = intervals
            .iter()
            .map(|&m| interval(&ds, m, centre, &ctx, cfg.alpha, cfg.bootstrap_reps, key))
            .collect::<harmonize_core::error::Result<Vec<IntervalSet>>>()?;
        Ok((values, checks, sets))
    })?;

    let dir = cfg.out_dir.clone();
    prepare_dir(&dir)?;
    let labels = ds.labels();

    let path = dir.join("estimates.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["estimator", "subgroup", "estimate"]).map_err(csv_err(&path))?;
    for (est, v) in &values {
        for (j, sub) in labels.iter().enumerate() {
            w.write_record([est, sub, &v[j].to_string()]).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(output_err(&path))?;

    let path = dir.join("intervals.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "subgroup", "estimate", "lower", "upper", "alpha"])
        .map_err(csv_err(&path))?;
    for s in &sets {
        for (j, sub) in labels.iter().enumerate() {
            w.write_record([
                s.method.name(),
                sub,
                &s.estimate[j].to_string(),
                &s.lower[j].to_string(),
                &s.upper[j].to_string(),
                &s.alpha.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(output_err(&path))?;

    let path = dir.join("design.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["subgroup", "pi", "q", "n_rct_control", "n_rct_experimental", "n_ec"])
        .map_err(csv_err(&path))?;
    for (j, sub) in labels.iter().enumerate() {
        w.write_record([
            sub.clone(),
            counts.pi[j].to_string(),
            counts.q_diag[j].to_string(),
            counts.n(j, 0, Study::Rct).to_string(),
            counts.n(j, 1, Study::Rct).to_string(),
            counts.n(j, 0, Study::Ec).to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(output_err(&path))?;

    let summary = json!({
        "subgroups": labels,
        "estimates": values.iter().map(|(e, v)| json!({"estimator": e, "values": v.as_slice()})).collect::<Vec<_>>(),
        "intervals": sets.iter().map(|s| json!({
            "method": s.method.name(),
            "alpha": s.alpha,
            "estimate": s.estimate.as_slice(),
            "lower": s.lower.as_slice(),
            "upper": s.upper.as_slice(),
        })).collect::<Vec<_>>(),
        "design": {
            "pi": counts.pi.as_slice(),
            "q": counts.q_diag.as_slice(),
            "q_bar": counts.q_bar,
        },
    });
    write_json(&dir.join("estimates.json"), &summary)?;

    let violated = checks.iter().find(|c| !c.satisfied).map(|c| CliError::ConstraintViolated {
        estimator: c.estimator.clone(),
        gap: c.gap,
    });
    write_manifest(
        &dir,
        "estimate",
        cfg,
        json!({ "full_constraint": checks }),
        vec!["estimates.csv", "estimates.json", "intervals.csv", "design.csv", "manifest.json"],
    )?;
    match violated {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_report(dir: &Path, report: &MonteCarloReport) -> Result<(), CliError> {
    prepare_dir(dir)?;
    write_report_csv(report, &dir.join("report.csv"))?;
    write_report_json(report, &dir.join("report.json"))?;
    write_replicates_csv(report, &dir.join("replicates.csv"))?;
    Ok(())
}

pub fn simulate(cfg: &mut SimulateConfig) -> Result<(), CliError> {
    check_alpha(cfg.alpha)?;
    check_prior(cfg.cut_prior_variance)?;
    check_workers(cfg.workers)?;
    let (spec, version): (ScenarioSpec, Option<u32>) = match (&cfg.preset, &cfg.scenario) {
        (Some(name), None) => match preset(name)? {
            Preset::Scenario { version, spec } => (spec, Some(version)),
            Preset::Pools { .. } => {
                return Err(CliError::Config(format!("preset {name:?} is for the resample command")))
            }
        },
        (None, Some(spec)) => (spec.clone(), None),
        _ => return Err(CliError::Config("give exactly one of \"preset\" and \"scenario\"".into())),
    };
    let mut estimators = cfg.estimators.clone();
    estimators.extend(cfg.harmonization.estimators()?);
    let mc = MonteCarloConfig {
        estimators,
        intervals: cfg.intervals.clone(),
        alpha: cfg.alpha,
        bootstrap_reps: cfg.bootstrap_reps,
        reps: cfg.reps,
        seed: cfg.seed,
        workers: cfg.workers,
        cut_prior_variance: cfg.cut_prior_variance,
    };
    info!("simulating {} replicates of {}", cfg.reps, spec.name);
    let report = run_monte_carlo(&spec, &mc)?;
    write_report(&cfg.out_dir, &report)?;
    write_manifest(
        &cfg.out_dir,
        "simulate",
        cfg,
        json!({ "preset_version": version, "scenario": spec, "completed": report.completed, "excluded": report.excluded }),
        vec!["report.csv", "report.json", "replicates.csv", "manifest.json"],
    )
}

pub fn resample(cfg: &mut ResampleCliConfig) -> Result<(), CliError> {
    check_workers(cfg.workers)?;
    let sigma = crate::config::HarmonizationOptions {
        lambda: vec![Lambda::Full],
        sigma_mode: cfg.sigma_mode,
        fixed_sigma: cfg.fixed_sigma,
    }
    .sigma()?;
    let (trial, ec, labels, d, pools) = match (&cfg.preset, &cfg.trial, &cfg.ec) {
        (Some(name), None, None) => match preset(name)? {
            Preset::Pools { version, spec } => {
                let (trial, ec) = synthesize_pools(&spec, cfg.seed)?;
                let pools = json!({ "preset_version": version, "pools": spec });
                (trial, ec, spec.labels.clone(), spec.d(), pools)
            }
            Preset::Scenario { .. } => {
                return Err(CliError::Config(format!("preset {name:?} is for the simulate command")))
            }
        },
        (None, Some(t), Some(e)) => {
            let schema = required(&cfg.schema, "schema")?;
            if schema.family != OutcomeFamily::Binary {
                return Err(CliError::Config("resampling needs binary outcomes".into()));
            }
            let (trial, labels) = load_pool(t, schema, Study::Rct, None)?;
            let (ec, _) = load_pool(e, schema, Study::Ec, Some(&labels))?;
            (trial, ec, labels, schema.covariates.len(), Value::Null)
        }
        _ => {
            return Err(CliError::Config(
                "give either \"preset\" or both \"trial\" and \"ec\" pool files".into(),
            ))
        }
    };
    let rc = ResampleConfig {
        n_control: cfg.n_control,
        n_experimental: cfg.n_experimental,
        n_ec: cfg.n_ec,
        reps: cfg.reps,
        seed: cfg.seed,
        workers: cfg.workers,
        spike: cfg.spike.clone(),
        prevalence: cfg.prevalence,
        harmonized_sigma: sigma,
    };
    info!("resampling {} trials from pools of {} and {} records", cfg.reps, trial.len(), ec.len());
    let report = run_resampling(&trial, &ec, &labels, d, &rc)?;
    write_report(&cfg.out_dir, &report)?;
    write_manifest(
        &cfg.out_dir,
        "resample",
        cfg,
        json!({ "pools": pools, "prevalence": cfg.prevalence, "completed": report.completed, "excluded": report.excluded }),
        vec!["report.csv", "report.json", "replicates.csv", "manifest.json"],
    )
}

