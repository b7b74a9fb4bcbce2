//! Simulation scenarios: exact per-cell designs with normal covariates and
//! continuous (mean-shift) or binary (logit-shift) outcome models.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedDataset, OutcomeFamily, Study, SubjectRecord};
use crate::error::{HarmonizeError, Result};
use crate::glm::logistic;
use crate::quadrature::normal_expectation;

use super::resample::PoolSpec;
use super::rng::{substream, StreamRole};

/// Independent normal covariates with study-specific means and SDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub d: usize,
    #[serde(default)]
    pub rct_mean: Vec<f64>,
    #[serde(default)]
    pub rct_sd: Vec<f64>,
    #[serde(default)]
    pub ec_mean: Vec<f64>,
    #[serde(default)]
    pub ec_sd: Vec<f64>,
    /// Draw the covariates once and reuse them in every replicate.
    #[serde(default)]
    pub fixed: bool,
}

/// Continuous: Y = μ_k + θ_k T + γ_k·[EC] + βᵀX + N(0, φ²).
/// Binary: logit P(Y = 1) = ν_k + η_k T + δ_k·[EC] + βᵀX, with `mu` holding
/// ν, `theta` holding η and `distortion` holding δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub family: OutcomeFamily,
    /// Per subgroup: [control, experimental] trial sizes.
    pub n_rct: Vec<[usize; 2]>,
    pub n_ec: Vec<usize>,
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub distortion: Vec<f64>,
    #[serde(default)]
    pub phi2: f64,
    #[serde(default)]
    pub covariates: CovariateSpec,
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Prevalences used for harmonization; the trial's empirical shares
    /// when absent.
    #[serde(default)]
    pub prevalence: Option<Vec<f64>>,
}

impl ScenarioSpec {
    pub fn k(&self) -> usize {
        self.n_rct.len()
    }

    pub fn d(&self) -> usize {
        self.covariates.d
    }

    pub fn labels(&self) -> Vec<String> {
        (1..=self.k()).map(|i| i.to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let bad = |m: String| Err(HarmonizeError::InvalidSpec(m));
        if k == 0 {
            return bad("at least one subgroup is required".into());
        }
        for (name, len) in [
            ("n_ec", self.n_ec.len()),
            ("mu", self.mu.len()),
            ("theta", self.theta.len()),
            ("distortion", self.distortion.len()),
        ] {
            if len != k {
                return bad(format!("{name} has length {len}, expected {k}"));
            }
        }
        if self.n_rct.iter().any(|c| c[0] == 0 || c[1] == 0) {
            return bad("every trial cell needs at least one patient".into());
        }
        if self
            .mu
            .iter()
            .chain(&self.theta)
            .chain(&self.distortion)
            .chain(&self.beta)
            .any(|v| !v.is_finite())
        {
            return bad("model parameters must be finite".into());
        }
        if self.family == OutcomeFamily::Continuous && !(self.phi2 > 0.0 && self.phi2.is_finite()) {
            return bad(format!("φ² must be positive for continuous outcomes, got {}", self.phi2));
        }
        let c = &self.covariates;
        let d = c.d;
        if self.beta.len() != d {
            return bad(format!("beta has length {}, expected {d}", self.beta.len()));
        }
        for (name, v) in [
            ("rct_mean", &c.rct_mean),
            ("rct_sd", &c.rct_sd),
            ("ec_mean", &c.ec_mean),
            ("ec_sd", &c.ec_sd),
        ] {
            if v.len() != d {
                return bad(format!("covariates.{name} has length {}, expected {d}", v.len()));
            }
        }
        if c.rct_sd.iter().chain(&c.ec_sd).any(|&s| !(s >= 0.0)) {
            return bad("covariate SDs must be non-negative".into());
        }
        if let Some(p) = &self.prevalence {
            if p.len() != k || p.iter().any(|&x| !(x > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return bad("prevalence must be K positive numbers summing to 1".into());
            }
        }
        Ok(())
    }

    /// γ_k = 1 ± Δ alternating, starting with +.
    pub fn alternating_distortion(k: usize, center: f64, delta: f64) -> Vec<f64> {
        (0..k).map(|j| if j % 2 == 0 { center + delta } else { center - delta }).collect()
    }
}

/// A named, versioned scenario or resampling-pool configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    Scenario { version: u32, spec: ScenarioSpec },
    Pools { version: u32, spec: PoolSpec },
}

pub const PRESET_NAMES: [&str; 6] = ["fig1-s1", "fig1-s2", "fig1-s3", "fig4", "fig5", "gbm-like"];

pub fn preset(name: &str) -> Result<Preset> {
    let text = match name {
        "fig1-s1" => include_str!("../../presets/fig1-s1.json"),
        "fig1-s2" => include_str!("../../presets/fig1-s2.json"),
        "fig1-s3" => include_str!("../../presets/fig1-s3.json"),
        "fig4" => include_str!("../../presets/fig4.json"),
        "fig5" => include_str!("../../presets/fig5.json"),
        "gbm-like" => include_str!("../../presets/gbm-like.json"),
        _ => {
            return Err(HarmonizeError::InvalidSpec(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(serde_json::from_str(text)?)
}

pub fn scenario_preset(name: &str) -> Result<ScenarioSpec> {
    match preset(name)? {
        Preset::Scenario { spec, .. } => Ok(spec),
        Preset::Pools { .. } => Err(HarmonizeError::InvalidSpec(format!("preset {name:?} describes resampling pools"))),
    }
}

/// Covariate rows for the RCT then EC records, in generation order.
fn draw_covariates(spec: &ScenarioSpec, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = &spec.covariates;
    let draw = |n: usize, mean: &[f64], sd: &[f64], rng: &mut dyn rand::RngCore| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..c.d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        mean[j] + sd[j] * z
                    })
                    .collect()
            })
            .collect()
    };
    let n_r: usize = spec.n_rct.iter().map(|c| c[0] + c[1]).sum();
    let n_e: usize = spec.n_ec.iter().sum();
    let rct = draw(n_r, &c.rct_mean, &c.rct_sd, rng);
    let ec = draw(n_e, &c.ec_mean, &c.ec_sd, rng);
    (rct, ec)
}

fn covariates_for(spec: &ScenarioSpec, seed: u64, index: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let stream_index = if spec.covariates.fixed { 0 } else { index as u64 };
    let mut rng = substream(seed, stream_index, StreamRole::Covariates, 0);
    draw_covariates(spec, &mut rng)
}

/// The `index`-th replicate dataset. Records are ordered by subgroup, then
/// arm (control first).
pub fn generate_replicate(spec: &ScenarioSpec, seed: u64, index: usize) -> Result<CombinedDataset> {
    spec.validate()?;
    let (xr, xe) = covariates_for(spec, seed, index);
    let mut rng = substream(seed, index as u64, StreamRole::Outcomes, 0);
    let sd = spec.phi2.sqrt();
    let draw = |k: usize, t: u8, ec: bool, x: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let lin = spec.mu[k]
            + spec.theta[k] * t as f64
            + if ec { spec.distortion[k] } else { 0.0 }
            + x.iter().zip(&spec.beta).map(|(a, b)| a * b).sum::<f64>();
        match spec.family {
            OutcomeFamily::Continuous => {
                let z: f64 = StandardNormal.sample(rng);
                lin + sd * z
            }
            OutcomeFamily::Binary => (rng.random::<f64>() < logistic(lin)) as u8 as f64,
        }
    };
    let mut rct = Vec::with_capacity(xr.len());
    let mut xr = xr.into_iter();
    for (k, cells) in spec.n_rct.iter().enumerate() {
        for t in 0..2u8 {
            for _ in 0..cells[t as usize] {
                let x = xr.next().unwrap();
                let y = draw(k, t, false, &x, &mut rng);
                rct.push(SubjectRecord::new(Study::Rct, k, t, y, x));
            }
        }
    }
    let mut ec = Vec::with_capacity(xe.len());
    let mut xe = xe.into_iter();
    for (k, &n) in spec.n_ec.iter().enumerate() {
        for _ in 0..n {
            let x = xe.next().unwrap();
            let y = draw(k, 0, true, &x, &mut rng);
            ec.push(SubjectRecord::new(Study::Ec, k, 0, y, x));
        }
    }
    CombinedDataset::new(rct, ec, spec.labels(), spec.d(), spec.family)
}

pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<CombinedDataset> {
    generate_replicate(spec, seed, 0)
}

/// Number of Gauss–Hermite nodes for population-averaged binary effects.
const GH_NODES: usize = 40;

/// True subgroup effects. Binary effects are risk differences averaged over
/// the trial covariate distribution: over the realized covariates when they
/// are fixed, otherwise over the population normal by quadrature.
pub fn true_theta(spec: &ScenarioSpec, seed: u64) -> Result<DVector<f64>> {
    spec.validate()?;
    let k = spec.k();
    if spec.family == OutcomeFamily::Continuous {
        return Ok(DVector::from_column_slice(&spec.theta));
    }
    let effect = |j: usize, xb: f64| logistic(spec.mu[j] + spec.theta[j] + xb) - logistic(spec.mu[j] + xb);
    if spec.d() > 0 && spec.covariates.fixed {
        let (xr, _) = covariates_for(spec, seed, 0);
        let mut out = DVector::zeros(k);
        let mut i = 0;
        for (j, cells) in spec.n_rct.iter().enumerate() {
            let n = cells[0] + cells[1];
            let s: f64 = xr[i..i + n]
                .iter()
                .map(|x| effect(j, x.iter().zip(&spec.beta).map(|(a, b)| a * b).sum()))
                .sum();
            out[j] = s / n as f64;
            i += n;
        }
        return Ok(out);
    }
    let c = &spec.covariates;
    let m: f64 = spec.beta.iter().zip(&c.rct_mean).map(|(b, m)| b * m).sum();
    let s: f64 = spec
        .beta
        .iter()
        .zip(&c.rct_sd)
        .map(|(b, s)| (b * s).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(DVector::from_fn(k, |j, _| normal_expectation(m, s, GH_NODES, |xb| effect(j, xb))))
}
