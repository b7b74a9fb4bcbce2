//! In-silico trials built by resampling a trial control arm and an external
//! dataset, with optional spiked-in effects.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedDataset, OutcomeFamily, PrevalenceSource, Study, SubjectRecord};
use crate::error::{HarmonizeError, Result};
use crate::glm::logistic;
use crate::pipeline::{evaluate, EstimatorSpec, PipelineContext, SigmaChoice};

use super::monte_carlo::{aggregate, run_indexed, MonteCarloReport, ReplicateOutcome};
use super::rng::{substream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrevalenceMode {
    /// Subgroup shares of each resampled trial.
    #[default]
    Empirical,
    /// Subgroup shares of the trial pool.
    Fixed,
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
fn d_reps() -> usize {
    1000
}
fn d_workers() -> usize {
    1
}
fn d_sigma() -> SigmaChoice {
    SigmaChoice::Bd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleConfig {
    #[serde(default = "d_control")]
    pub n_control: usize,
    #[serde(default = "d_experimental")]
    pub n_experimental: usize,
    #[serde(default = "d_ec")]
    pub n_ec: usize,
    #[serde(default = "d_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_workers")]
    pub workers: usize,
    /// Per-subgroup increase of the experimental response rate; empty for none.
    #[serde(default)]
    pub spike: Vec<f64>,
    #[serde(default)]
    pub prevalence: PrevalenceMode,
    #[serde(default = "d_sigma")]
    pub harmonized_sigma: SigmaChoice,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            n_control: d_control(),
            n_experimental: d_experimental(),
            n_ec: d_ec(),
            reps: d_reps(),
            seed: 0,
            workers: d_workers(),
            spike: Vec::new(),
            prevalence: PrevalenceMode::Empirical,
            harmonized_sigma: d_sigma(),
        }
    }
}

/// Pooled logistic, IPW logistic, harmonized IPW and trial-only logistic.
pub fn resample_estimators(sigma: SigmaChoice) -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::Pooled {},
        EstimatorSpec::Ipw {},
        EstimatorSpec::HarmonizedIpw { sigma },
        EstimatorSpec::RctOnly {},
    ]
}

/// Flips control outcomes 0 → 1 with probability Δ_k / (1 − p_k), so a
/// resampled arm with response rate p_k has expected rate p_k + Δ_k.
pub fn spike_effect<R: Rng>(arm: &mut [SubjectRecord], delta: &[f64], base_rate: &[f64], rng: &mut R) -> Result<()> {
    if delta.len() != base_rate.len() {
        return Err(HarmonizeError::InvalidEffect("spike and base rates differ in length".into()));
    }
    let mut flip = Vec::with_capacity(delta.len());
    for (k, (&d, &p)) in delta.iter().zip(base_rate).enumerate() {
        if !(d >= 0.0) || !(0.0..=1.0).contains(&p) {
            return Err(HarmonizeError::InvalidEffect(format!("subgroup {k}: spike {d} on rate {p}")));
        }
        if p + d > 1.0 + 1e-12 {
            return Err(HarmonizeError::InvalidEffect(format!(
                "subgroup {k}: target rate {} exceeds 1",
                p + d
            )));
        }
        flip.push(if d == 0.0 { 0.0 } else { (d / (1.0 - p)).min(1.0) });
    }
    for r in arm.iter_mut() {
        if r.outcome != 0.0 && r.outcome != 1.0 {
            return Err(HarmonizeError::InvalidEffect("spiking needs binary outcomes".into()));
        }
        let f = *flip
            .get(r.subgroup)
            .ok_or_else(|| HarmonizeError::InvalidEffect(format!("no spike for subgroup {}", r.subgroup)))?;
        if r.outcome == 0.0 && f > 0.0 && rng.random::<f64>() < f {
            r.outcome = 1.0;
        }
    }
    Ok(())
}

fn rates(pool: &[SubjectRecord], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut s = vec![0.0; k];
    let mut n = vec![0usize; k];
    for r in pool {
        s[r.subgroup] += r.outcome;
        n[r.subgroup] += 1;
    }
    (s.iter().zip(&n).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect(), n)
}

fn draw(pool: &[SubjectRecord], n: usize, study: Study, t: u8, rng: &mut impl Rng) -> Vec<SubjectRecord> {
    (0..n)
        .map(|_| {
            let r = &pool[rng.random_range(0..pool.len())];
            SubjectRecord {
                study,
                treatment: t,
                weight: 1.0,
                ..r.clone()
            }
        })
        .collect()
}

/// Runs `cfg.reps` resampled trials. Both trial arms come from the control
/// records of `trial`, so the true effects are the spike values (0 without
/// a spike).
pub fn run_resampling(
    trial: &[SubjectRecord],
    ec: &[SubjectRecord],
    labels: &[String],
    d: usize,
    cfg: &ResampleConfig,
) -> Result<MonteCarloReport> {
    let k = labels.len();
    let controls: Vec<SubjectRecord> = trial.iter().filter(|r| r.treatment == 0).cloned().collect();
    if controls.is_empty() {
        return Err(HarmonizeError::PoolTooSmall("the trial pool has no control records".into()));
    }
    if ec.is_empty() {
        return Err(HarmonizeError::PoolTooSmall("the external pool is empty".into()));
    }
    let (base, counts) = rates(&controls, k);
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(HarmonizeError::PoolTooSmall(format!("subgroup {} is absent from the trial pool", labels[j])));
    }
    if cfg.n_control == 0 || cfg.n_experimental == 0 || cfg.n_ec == 0 {
        return Err(HarmonizeError::InvalidArgument("resampled arm sizes must be positive".into()));
    }
    let spike = if cfg.spike.is_empty() { vec![0.0; k] } else { cfg.spike.clone() };
    if spike.len() != k {
        return Err(HarmonizeError::InvalidEffect(format!("spike has length {}, expected {k}", spike.len())));
    }
    // validates the spike against the pool rates up front
    spike_effect(&mut [], &spike, &base, &mut substream(cfg.seed, 0, StreamRole::Spike, 0))?;

    let prevalence = match cfg.prevalence {
        PrevalenceMode::Empirical => PrevalenceSource::RctEmpirical,
        PrevalenceMode::Fixed => {
            let n = controls.len() as f64;
            PrevalenceSource::UserSupplied(counts.iter().map(|&c| c as f64 / n).collect())
        }
    };
    let ctx = PipelineContext {
        prevalence,
        ..Default::default()
    };
    let estimators = resample_estimators(cfg.harmonized_sigma);

    let outcomes = run_indexed(cfg.reps, cfg.workers, |i| -> Result<ReplicateOutcome> {
        let mut rng = substream(cfg.seed, i as u64, StreamRole::Resample, 0);
        let mut rct = draw(&controls, cfg.n_control, Study::Rct, 0, &mut rng);
        let mut exp = draw(&controls, cfg.n_experimental, Study::Rct, 1, &mut rng);
        let ec_rows = draw(ec, cfg.n_ec, Study::Ec, 0, &mut rng);
        spike_effect(&mut exp, &spike, &base, &mut substream(cfg.seed, i as u64, StreamRole::Spike, 0))?;
        rct.append(&mut exp);
        let ds = CombinedDataset::new(rct, ec_rows, labels.to_vec(), d, OutcomeFamily::Binary)?;
        let estimates = estimators
            .iter()
            .map(|e| evaluate(&ds, e, &ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReplicateOutcome::new(i, estimates, Vec::new()))
    })?;

    let est_labels = estimators.iter().map(|e| e.label()).collect();
    aggregate(
        "resample",
        cfg.seed,
        labels.to_vec(),
        DVector::from_vec(spike),
        est_labels,
        Vec::new(),
        outcomes,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalCovariates {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Synthetic trial-control and external pools: logit P(Y = 1) =
/// intercept_k + βᵀX (+ `ec_shift` for external records), with normal
/// covariates whose means differ between the pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub trial_size: usize,
    pub trial_shares: Vec<f64>,
    pub ec_size: usize,
    pub ec_shares: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub beta: Vec<f64>,
    pub trial_covariates: NormalCovariates,
    pub ec_covariates: NormalCovariates,
    pub ec_shift: f64,
}

impl PoolSpec {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.d();
        let bad = |m: &str| Err(HarmonizeError::InvalidSpec(m.into()));
        if k == 0 {
            return bad("at least one subgroup is required");
        }
        if self.trial_shares.len() != k || self.ec_shares.len() != k || self.intercepts.len() != k {
            return bad("shares and intercepts need one entry per subgroup");
        }
        for c in [&self.trial_covariates, &self.ec_covariates] {
            if c.mean.len() != d || c.sd.len() != d || c.sd.iter().any(|&s| !(s >= 0.0)) {
                return bad("covariate means and SDs need one entry per coefficient");
            }
        }
        for s in [&self.trial_shares, &self.ec_shares] {
            if s.iter().any(|&x| !(x >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad("shares must be non-negative and sum to 1");
            }
        }
        if self.trial_size < k || self.ec_size == 0 {
            return bad("pool sizes are too small");
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `shares · n`.
fn allocate(n: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - out.iter().sum::<usize>();
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out
}

/// Draws the trial-control pool and the external pool of `spec`.
pub fn synthesize_pools(spec: &PoolSpec, seed: u64) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    spec.validate()?;
    let mut rng = substream(seed, 0, StreamRole::Pool, 0);
    let mut make = |study: Study, size: usize, shares: &[f64], cov: &NormalCovariates, shift: f64| {
        let mut rows = Vec::with_capacity(size);
        for (k, n) in allocate(size, shares).into_iter().enumerate() {
            for _ in 0..n {
                let x: Vec<f64> = (0..spec.d())
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cov.mean[j] + cov.sd[j] * z
                    })
                    .collect();
                let eta = spec.intercepts[k] + shift + x.iter().zip(&spec.beta).map(|(a, b)| a * b).sum::<f64>();
                let y = (rng.random::<f64>() < logistic(eta)) as u8 as f64;
                rows.push(SubjectRecord::new(study, k, 0, y, x));
            }
        }
        rows
    };
    let trial = make(Study::Rct, spec.trial_size, &spec.trial_shares, &spec.trial_covariates, 0.0);
    let ec = make(Study::Ec, spec.ec_size, &spec.ec_shares, &spec.ec_covariates, spec.ec_shift);
    Ok((trial, ec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arm(n: usize, ones: usize) -> Vec<SubjectRecord> {
        (0..n)
            .map(|i| SubjectRecord::new(Study::Rct, 0, 1, (i < ones) as u8 as f64, vec![]))
            .collect()
    }

    #[test]
    fn spike_edge_cases() {
        let mut rng = substream(1, 0, StreamRole::Spike, 0);
        let mut a = arm(50, 25);
        let before = a.clone();
        spike_effect(&mut a, &[0.0], &[0.5], &mut rng).unwrap();
        assert_eq!(a, before);
        spike_effect(&mut a, &[0.5], &[0.5], &mut rng).unwrap();
        assert!(a.iter().all(|r| r.outcome == 1.0));
        assert!(matches!(
            spike_effect(&mut arm(4, 2), &[0.6], &[0.5], &mut rng),
            Err(HarmonizeError::InvalidEffect(_))
        ));
    }

    #[test]
    fn spike_raises_rate_in_expectation() {
        let mut total = 0.0;
        let reps = 400;
        for i in 0..reps {
            let mut a = arm(100, 50);
            spike_effect(&mut a, &[0.1], &[0.5], &mut substream(2, i, StreamRole::Spike, 0)).unwrap();
            total += a.iter().map(|r| r.outcome).sum::<f64>() / 100.0;
        }
        let mean = total / reps as f64;
        // sd of the mean ≈ sqrt(0.5·0.2/100/400) ≈ 0.0016
        assert!((mean - 0.6).abs() < 0.006, "{mean}");
    }

    #[test]
    fn allocation_sums_to_total() {
        assert_eq!(allocate(352, &[0.20, 0.47, 0.10, 0.23]), vec![70, 166, 35, 81]);
        assert_eq!(allocate(10, &[0.5, 0.5]).iter().sum::<usize>(), 10);
    }
}
