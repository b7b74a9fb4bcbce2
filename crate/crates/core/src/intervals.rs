//! Confidence intervals for subgroup effects: normal-theory intervals from an
//! analytic or cut covariance, a parametric bootstrap, and the trial-only
//! comparator.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bayes::NormalPosterior;
use crate::data::{CombinedDataset, OutcomeFamily, Study};
use crate::error::{HarmonizeError, Result};
use crate::estimators::cell_residual_variance;
use crate::sim::rng::{substream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Analytic,
    Cut,
    Bootstrap,
    RctOnly,
}

impl IntervalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            IntervalMethod::Analytic => "analytic",
            IntervalMethod::Cut => "cut",
            IntervalMethod::Bootstrap => "bootstrap",
            IntervalMethod::RctOnly => "rct_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub estimate: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub method: IntervalMethod,
    pub alpha: f64,
}

impl IntervalSet {
    fn centered(estimate: DVector<f64>, half: DVector<f64>, method: IntervalMethod, alpha: f64) -> Self {
        Self {
            lower: &estimate - &half,
            upper: &estimate + &half,
            estimate,
            method,
            alpha,
        }
    }

    pub fn width(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    pub fn covers(&self, k: usize, value: f64) -> bool {
        self.lower[k] <= value && value <= self.upper[k]
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(HarmonizeError::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// z_{1−α/2}.
pub fn z_quantile(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha / 2.0).max(0.0))
}

fn normal_interval(
    estimate: &DVector<f64>,
    cov: &DMatrix<f64>,
    alpha: f64,
    method: IntervalMethod,
) -> Result<IntervalSet> {
    let k = estimate.len();
    if cov.nrows() != k || cov.ncols() != k {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "covariance is {}x{}, expected {k}x{k}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let z = z_quantile(alpha)?;
    let mut half = DVector::zeros(k);
    for j in 0..k {
        let v = cov[(j, j)];
        if !(v >= 0.0) {
            return Err(HarmonizeError::NegativeVariance { subgroup: j, value: v });
        }
        half[j] = z * v.sqrt();
    }
    Ok(IntervalSet::centered(estimate.clone(), half, method, alpha))
}

/// θ̂ʰ ± z√diag(Vʰ).
pub fn analytic_interval(theta_h: &DVector<f64>, v_h: &DMatrix<f64>, alpha: f64) -> Result<IntervalSet> {
    normal_interval(theta_h, v_h, alpha, IntervalMethod::Analytic)
}

/// Mean ± z·sd of the cut distribution's subgroup marginals.
pub fn cut_interval(cut: &NormalPosterior, alpha: f64) -> Result<IntervalSet> {
    let (mean, cov) = cut.subgroup_effects()?;
    normal_interval(&mean, &cov, alpha, IntervalMethod::Cut)
}

/// Trial-only difference of means with unpooled per-arm variances.
pub fn rct_only_interval(ds: &CombinedDataset, alpha: f64) -> Result<IntervalSet> {
    let z = z_quantile(alpha)?;
    let k = ds.k();
    let mut est = DVector::zeros(k);
    let mut half = DVector::zeros(k);
    for j in 0..k {
        let mut mv = [(0.0, 0.0); 2];
        for t in [0u8, 1] {
            let y: Vec<f64> = ds.rct_outcomes(j, t).collect();
            if y.len() < 2 {
                return Err(HarmonizeError::InsufficientData(format!(
                    "subgroup {j}, arm {t} has {} trial patients; need at least 2",
                    y.len()
                )));
            }
            let n = y.len() as f64;
            let m = y.iter().sum::<f64>() / n;
            let s2 = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            mv[t as usize] = (m, s2 / n);
        }
        est[j] = mv[1].0 - mv[0].0;
        half[j] = z * (mv[0].1 + mv[1].1).sqrt();
    }
    Ok(IntervalSet::centered(est, half, IntervalMethod::RctOnly, alpha))
}

/// Parameters of the cell-means model: Y = μ_k + θ_k T + γ_k·[EC] + N(0, φ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleModelParams {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi2: f64,
}

impl SimpleModelParams {
    /// Method-of-moments fit: cell means and the pooled within-cell variance
    /// with EC rows as separate cells. γ_k is 0 for subgroups without ECs.
    pub fn estimate(ds: &CombinedDataset) -> Result<Self> {
        let k = ds.k();
        let mut sums = vec![[(0.0, 0usize); 3]; k];
        for r in ds.rows() {
            let c = match (r.study, r.treatment) {
                (Study::Ec, _) => 2,
                (_, t) => t as usize,
            };
            sums[r.subgroup][c].0 += r.outcome;
            sums[r.subgroup][c].1 += 1;
        }
        let mut p = SimpleModelParams {
            mu: vec![0.0; k],
            theta: vec![0.0; k],
            gamma: vec![0.0; k],
            phi2: cell_residual_variance(ds, true),
        };
        for (j, s) in sums.iter().enumerate() {
            let mean = |c: usize| s[c].0 / s[c].1 as f64;
            if s[0].1 == 0 {
                return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "control" });
            }
            if s[1].1 == 0 {
                return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "experimental" });
            }
            p.mu[j] = mean(0);
            p.theta[j] = mean(1) - mean(0);
            if s[2].1 > 0 {
                p.gamma[j] = mean(2) - mean(0);
            }
        }
        if !p.phi2.is_finite() {
            return Err(HarmonizeError::InsufficientData("no residual degrees of freedom for φ²".into()));
        }
        Ok(p)
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.mu.len() != k || self.theta.len() != k || self.gamma.len() != k {
            return Err(HarmonizeError::InconsistentDimensions(format!(
                "model parameters must have length {k}"
            )));
        }
        if !(self.phi2 >= 0.0) {
            return Err(HarmonizeError::InvalidArgument(format!("φ² = {} is negative", self.phi2)));
        }
        Ok(())
    }

    /// Replaces the outcomes of `ds` with a draw from the model, keeping the design.
    pub fn resimulate<R: rand::Rng>(&self, ds: &mut CombinedDataset, rng: &mut R) -> Result<()> {
        let sd = self.phi2.sqrt();
        ds.replace_outcomes(|r| {
            let mut m = self.mu[r.subgroup] + self.theta[r.subgroup] * r.treatment as f64;
            if r.study == Study::Ec {
                m += self.gamma[r.subgroup];
            }
            let z: f64 = StandardNormal.sample(rng);
            m + sd * z
        })
    }
}

/// Sample quantile by linear interpolation between order statistics
/// (R type 7). `sorted` must be ascending.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Parametric bootstrap: `reps` datasets are drawn from `params` on the
/// design of `ds`, the pipeline is rerun on each, and the interval is
/// centered at the observed estimate with width equal to the distance
/// between the α/2 and 1−α/2 quantiles of the replicate estimates.
pub fn bootstrap_interval<F>(
    ds: &CombinedDataset,
    pipeline: F,
    params: &SimpleModelParams,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<IntervalSet>
where
    F: Fn(&CombinedDataset) -> Result<DVector<f64>> + Sync,
{
    check_alpha(alpha)?;
    if ds.family() != OutcomeFamily::Continuous {
        return Err(HarmonizeError::InvalidArgument("the parametric bootstrap needs continuous outcomes".into()));
    }
    params.check(ds.k())?;
    if reps < 2 {
        return Err(HarmonizeError::InvalidArgument("the bootstrap needs at least 2 replicates".into()));
    }
    let observed = pipeline(ds)?;
    let k = observed.len();

    let draws: Vec<DVector<f64>> = (0..reps)
        .into_par_iter()
        .map_init(
            || ds.clone(),
            |work, b| {
                let mut rng = substream(seed, b as u64, StreamRole::Bootstrap, 0);
                let fail = |e: HarmonizeError| HarmonizeError::ReplicateFailure { index: b, reason: e.to_string() };
                params.resimulate(work, &mut rng).map_err(fail)?;
                let est = pipeline(work).map_err(fail)?;
                if est.len() != k {
                    return Err(fail(HarmonizeError::InconsistentDimensions("pipeline output changed length".into())));
                }
                Ok(est)
            },
        )
        .collect::<Result<_>>()?;

    let mut half = DVector::zeros(k);
    let mut col = vec![0.0; reps];
    for j in 0..k {
        for (c, d) in col.iter_mut().zip(&draws) {
            *c = d[j];
        }
        col.sort_by(f64::total_cmp);
        let w = quantile_type7(&col, 1.0 - alpha / 2.0) - quantile_type7(&col, alpha / 2.0);
        half[j] = 0.5 * w.max(0.0);
    }
    Ok(IntervalSet::centered(observed, half, IntervalMethod::Bootstrap, alpha))
}
