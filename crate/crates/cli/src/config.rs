//! Run configuration files. Every field has a default except the data
//! sources; command-line flags are applied on top of the file.

use std::path::{Path, PathBuf};

use harmonize_core::bayes::FLAT_PRIOR_VARIANCE;
use harmonize_core::data::Schema;
use harmonize_core::harmonize::{Lambda, SigmaMode};
use harmonize_core::intervals::IntervalMethod;
use harmonize_core::pipeline::{EstimatorSpec, SigmaChoice};
use harmonize_core::sim::resample::PrevalenceMode;
use harmonize_core::sim::ScenarioSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn d_lambda() -> Vec<Lambda> {
    vec![Lambda::Full]
}
fn d_sigma_mode() -> SigmaMode {
    SigmaMode::Bd
}
fn d_fixed() -> SigmaChoice {
    SigmaChoice::Identity
}
fn d_alpha() -> f64 {
    0.05
}
fn d_boot() -> usize {
    500
}
fn d_one() -> usize {
    1
}
fn d_estimators() -> Vec<EstimatorSpec> {
    vec![EstimatorSpec::Pooled {}, EstimatorSpec::RctOnly {}]
}
fn d_prior() -> f64 {
    FLAT_PRIOR_VARIANCE
}
fn d_out() -> PathBuf {
    PathBuf::from("harmonize-out")
}
fn d_sim_reps() -> usize {
    2000
}
fn d_control() -> usize {
    100
}
fn d_experimental() -> usize {
    200
}
fn d_ec() -> usize {
    600
}
fn d_resample_reps() -> usize {
    1000
}

/// How the harmonized estimators are built: one per λ in the grid, with Σ
/// chosen by `sigma_mode` (`fixed` uses `fixed_sigma`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonizationOptions {
    #[serde(default = "d_lambda")]
    pub lambda: Vec<Lambda>,
    #[serde(default = "d_sigma_mode")]
    pub sigma_mode: SigmaMode,
    #[serde(default = "d_fixed")]
    pub fixed_sigma: SigmaChoice,
}

impl Default for HarmonizationOptions {
    fn default() -> Self {
        Self {
            lambda: d_lambda(),
            sigma_mode: d_sigma_mode(),
            fixed_sigma: d_fixed(),
        }
    }
}

impl HarmonizationOptions {
    pub fn sigma(&self) -> Result<SigmaChoice, CliError> {
        match self.sigma_mode {
            SigmaMode::Bd => Ok(SigmaChoice::Bd),
            SigmaMode::Vd => Ok(SigmaChoice::Vd),
            SigmaMode::Fixed => match self.fixed_sigma {
                s @ (SigmaChoice::Identity | SigmaChoice::Design) => Ok(s),
                other => Err(CliError::Config(format!(
                    "fixed_sigma must be \"identity\" or \"design\", got {:?}",
                    other.name()
                ))),
            },
        }
    }

    /// Harmonized estimators for the λ grid.
    pub fn estimators(&self) -> Result<Vec<EstimatorSpec>, CliError> {
        if self.lambda.is_empty() {
            return Err(CliError::Config("the lambda grid is empty".into()));
        }
        let sigma = self.sigma()?;
        Ok(self
            .lambda
            .iter()
            .map(|&lambda| EstimatorSpec::Harmonized { lambda, sigma })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default)]
    pub rct: Option<PathBuf>,
    #[serde(default)]
    pub ec: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    /// Estimators run besides the harmonized ones built from `harmonization`.
    #[serde(default = "d_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub harmonization: HarmonizationOptions,
    #[serde(default)]
    pub intervals: Option<Vec<IntervalMethod>>,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_boot")]
    pub bootstrap_reps: usize,
    /// Prior variance of both analysts' normal priors for cut intervals.
    #[serde(default = "d_prior")]
    pub cut_prior_variance: f64,
    #[serde(default)]
    pub prevalence: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_one")]
    pub workers: usize,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    /// Estimators run besides the harmonized ones built from `harmonization`.
    #[serde(default = "d_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub harmonization: HarmonizationOptions,
    #[serde(default)]
    pub intervals: Vec<IntervalMethod>,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_boot")]
    pub bootstrap_reps: usize,
    /// Prior variance of both analysts' normal priors for cut intervals.
    #[serde(default = "d_prior")]
    pub cut_prior_variance: f64,
    #[serde(default = "d_sim_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_one")]
    pub workers: usize,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleCliConfig {
    /// A pool preset; alternatively `trial` and `ec` CSV pools with `schema`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub trial: Option<PathBuf>,
    #[serde(default)]
    pub ec: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    #[serde(default = "d_control")]
    pub n_control: usize,
    #[serde(default = "d_experimental")]
    pub n_experimental: usize,
    #[serde(default = "d_ec")]
    pub n_ec: usize,
    #[serde(default = "d_resample_reps")]
    pub reps: usize,
    #[serde(default)]
    pub spike: Vec<f64>,
    #[serde(default)]
    pub prevalence: PrevalenceMode,
    #[serde(default = "d_sigma_mode")]
    pub sigma_mode: SigmaMode,
    #[serde(default = "d_fixed")]
    pub fixed_sigma: SigmaChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_one")]
    pub workers: usize,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

/// Reads a config file, or the all-defaults config when `path` is `None`.
pub fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

/// Parses `--lambda`: a comma-separated list of numbers or "full".
pub fn parse_lambda_grid(s: &str) -> Result<Vec<Lambda>, CliError> {
    s.split(',')
        .map(|t| Lambda::parse(t.trim()).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}
