//! Replicated estimation on simulated scenarios and aggregation into bias,
//! SD, RMSE, coverage and width with Monte-Carlo standard errors.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::FLAT_PRIOR_VARIANCE;
use crate::data::{OutcomeFamily, PrevalenceSource};
use crate::error::{HarmonizeError, Result};
use crate::intervals::{IntervalMethod, IntervalSet};
use crate::pipeline::{evaluate, interval, EstimatorSpec, PipelineContext};

use super::rng::{stream_key, StreamRole};
use super::scenario::{generate_replicate, true_theta, ScenarioSpec};

fn d_alpha() -> f64 {
    0.05
}
fn d_boot() -> usize {
    500
}
fn d_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub estimators: Vec<EstimatorSpec>,
    /// Interval methods other than `rct_only` are built around the first
    /// harmonized estimator in `estimators`.
    #[serde(default)]
    pub intervals: Vec<IntervalMethod>,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_boot")]
    pub bootstrap_reps: usize,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default = "d_prior")]
    pub cut_prior_variance: f64,
}

fn d_prior() -> f64 {
    FLAT_PRIOR_VARIANCE
}

/// Estimates (and interval bounds) of one successful replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub estimates: Vec<DVector<f64>>,
    pub intervals: Vec<IntervalSet>,
}

impl ReplicateOutcome {
    pub fn new(index: usize, estimates: Vec<DVector<f64>>, intervals: Vec<IntervalSet>) -> Self {
        Self {
            index,
            estimates,
            intervals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: String,
    pub subgroup: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub scenario: String,
    pub seed: u64,
    pub reps: usize,
    pub completed: usize,
    pub excluded: usize,
    pub failures: Vec<FailureRecord>,
    pub labels: Vec<String>,
    pub truth: Vec<f64>,
    pub estimators: Vec<String>,
    pub intervals: Vec<String>,
    pub rows: Vec<MetricRow>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateOutcome>,
}

impl MonteCarloReport {
    pub fn metric(&self, estimator: &str, subgroup: usize, metric: &str) -> Option<&MetricRow> {
        let label = self.labels.get(subgroup)?;
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && &r.subgroup == label && r.metric == metric)
    }

    /// Per-replicate estimates of one estimator and subgroup, in replicate order.
    pub fn estimates(&self, estimator: &str, subgroup: usize) -> Option<Vec<f64>> {
        let e = self.estimators.iter().position(|l| l == estimator)?;
        Some(self.replicates.iter().map(|r| r.estimates[e][subgroup]).collect())
    }
}

/// Evaluates `f(0..reps)` on a pool of `workers` threads and returns the
/// results in index order.
pub fn run_indexed<T, F>(reps: usize, workers: usize, f: F) -> Result<Vec<std::result::Result<T, String>>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarmonizeError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|i| f(i).map_err(|e| e.to_string()))
            .collect()
    }))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean and SD with denominator n.
fn mean_sd(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}

fn estimator_rows(label: &str, subgroup: &str, values: &[f64], truth: f64) -> Vec<MetricRow> {
    let n = values.len() as f64;
    let (m, sd) = mean_sd(values);
    let bias = m - truth;
    let sq: Vec<f64> = values.iter().map(|v| (v - truth).powi(2)).collect();
    let (msq, sd_sq) = mean_sd(&sq);
    let rmse = msq.sqrt();
    let row = |metric: &str, value: f64, mc_se: f64| MetricRow {
        estimator: label.to_string(),
        subgroup: subgroup.to_string(),
        metric: metric.to_string(),
        value,
        mc_se,
    };
    vec![
        row("mean", m, sd / n.sqrt()),
        row("bias", bias, sd / n.sqrt()),
        row("sd", sd, sd / (2.0 * (n - 1.0)).sqrt()),
        row("rmse", rmse, if rmse > 0.0 { sd_sq / (2.0 * rmse * n.sqrt()) } else { 0.0 }),
    ]
}

fn interval_rows(label: &str, subgroup: &str, cover: &[f64], width: &[f64]) -> Vec<MetricRow> {
    let n = cover.len() as f64;
    let p = mean(cover);
    let (w, w_sd) = mean_sd(width);
    vec![
        MetricRow {
            estimator: label.to_string(),
            subgroup: subgroup.to_string(),
            metric: "coverage".into(),
            value: p,
            mc_se: (p * (1.0 - p) / n).sqrt(),
        },
        MetricRow {
            estimator: label.to_string(),
            subgroup: subgroup.to_string(),
            metric: "width".into(),
            value: w,
            mc_se: w_sd / n.sqrt(),
        },
    ]
}

pub fn interval_label(m: IntervalMethod) -> String {
    format!("interval_{}", m.name())
}

/// Builds the report from per-replicate results; failed replicates are
/// listed and left out of every aggregate.
pub fn aggregate(
    scenario: &str,
    seed: u64,
    labels: Vec<String>,
    truth: DVector<f64>,
    estimators: Vec<String>,
    intervals: Vec<IntervalMethod>,
    outcomes: Vec<std::result::Result<ReplicateOutcome, String>>,
) -> Result<MonteCarloReport> {
    let reps = outcomes.len();
    let mut ok = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => ok.push(r),
            Err(reason) => failures.push(FailureRecord { index: i, reason }),
        }
    }
    if ok.len() < 2 {
        let first = failures.first().cloned().unwrap_or(FailureRecord {
            index: 0,
            reason: "fewer than two replicates".into(),
        });
        return Err(HarmonizeError::ReplicateFailure {
            index: first.index,
            reason: format!("{} of {reps} replicates failed; first: {}", failures.len(), first.reason),
        });
    }
    if !failures.is_empty() {
        log::warn!("{} of {reps} replicates failed and were excluded", failures.len());
    }
    let k = labels.len();
    let mut rows = Vec::new();
    for (e, label) in estimators.iter().enumerate() {
        for j in 0..k {
            let values: Vec<f64> = ok.iter().map(|r| r.estimates[e][j]).collect();
            rows.extend(estimator_rows(label, &labels[j], &values, truth[j]));
        }
    }
    for (m, method) in intervals.iter().enumerate() {
        let label = interval_label(*method);
        for j in 0..k {
            let cover: Vec<f64> = ok.iter().map(|r| r.intervals[m].covers(j, truth[j]) as u8 as f64).collect();
            let width: Vec<f64> = ok.iter().map(|r| r.intervals[m].width()[j]).collect();
            rows.extend(interval_rows(&label, &labels[j], &cover, &width));
        }
    }
    Ok(MonteCarloReport {
        scenario: scenario.to_string(),
        seed,
        reps,
        completed: ok.len(),
        excluded: failures.len(),
        failures,
        labels,
        truth: truth.iter().copied().collect(),
        estimators,
        intervals: intervals.iter().map(|m| interval_label(*m)).collect(),
        rows,
        replicates: ok,
    })
}

pub fn scenario_context(spec: &ScenarioSpec) -> PipelineContext {
    PipelineContext {
        prevalence: match &spec.prevalence {
            Some(p) => PrevalenceSource::UserSupplied(p.clone()),
            None => PrevalenceSource::RctEmpirical,
        },
        mu_true: (spec.family == OutcomeFamily::Continuous).then(|| spec.mu.clone()),
        cut_prior_variance: FLAT_PRIOR_VARIANCE,
    }
}

pub fn run_monte_carlo(spec: &ScenarioSpec, cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    spec.validate()?;
    if cfg.reps < 2 {
        return Err(HarmonizeError::InvalidArgument("at least 2 replicates are required".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(HarmonizeError::InvalidArgument("no estimators selected".into()));
    }
    let harmonized = cfg.estimators.iter().find(|e| e.is_harmonized()).copied();
    if harmonized.is_none()
        && cfg
            .intervals
            .iter()
            .any(|m| matches!(m, IntervalMethod::Analytic | IntervalMethod::Bootstrap))
    {
        return Err(HarmonizeError::InvalidArgument(
            "analytic and bootstrap intervals need a harmonized estimator".into(),
        ));
    }
    let truth = true_theta(spec, cfg.seed)?;
    let mut ctx = scenario_context(spec);
    ctx.cut_prior_variance = cfg.cut_prior_variance;
    let alpha = cfg.alpha;

    let outcomes = run_indexed(cfg.reps, cfg.workers, |i| -> Result<ReplicateOutcome> {
        let ds = generate_replicate(spec, cfg.seed, i)?;
        let estimates = cfg
            .estimators
            .iter()
            .map(|e| evaluate(&ds, e, &ctx))
            .collect::<Result<Vec<_>>>()?;
        let key = stream_key(cfg.seed, i as u64, StreamRole::Bootstrap, 0);
        let intervals = cfg
            .intervals
            .iter()
            .map(|&m| interval(&ds, m, harmonized.as_ref(), &ctx, alpha, cfg.bootstrap_reps, key))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReplicateOutcome::new(i, estimates, intervals))
    })?;

    aggregate(
        &spec.name,
        cfg.seed,
        spec.labels(),
        truth,
        cfg.estimators.iter().map(|e| e.label()).collect(),
        cfg.intervals.clone(),
        outcomes,
    )
}
