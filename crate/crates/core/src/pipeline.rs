//! Named estimators run end to end on a dataset. The initial estimator and
//! the overall trial estimate are chosen from the outcome family and the
//! presence of covariates:
//!
//! | data                      | subgroup effects       | overall effect      |
//! |---------------------------|------------------------|---------------------|
//! | continuous, no covariates | difference of means    | difference of means |
//! | continuous, covariates    | pooled OLS             | OLS on `[1, T, X]`  |
//! | binary                    | pooled logistic (MLE)  | difference of means |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bayes::{analyst1_posterior, analyst2_posterior, cut_distribution, NormalPosterior, FLAT_PRIOR_VARIANCE};
use crate::data::{compute_design_counts, CombinedDataset, DesignCounts, OutcomeFamily, PrevalenceSource};
use crate::error::{HarmonizeError, Result};
use crate::estimators::{
    cell_residual_variance, diff_means_joint_covariance, diff_means_overall, diff_means_pooled_subgroups,
    ipw_row_weights, logistic_marginal_effects, ols_joint_covariance, ols_overall_effect, ols_subgroup_effects,
    oracle_subgroups, rct_only_subgroups, EffectEstimate, RctModel,
};
use crate::glm::{build_design, fit_ols, DesignModel};
use crate::intervals::{
    analytic_interval, bootstrap_interval, cut_interval, rct_only_interval, IntervalMethod, IntervalSet,
    SimpleModelParams,
};
use crate::harmonize::{
    bd_direction_glm, bd_direction_linear, harmonized_covariance, solve_sigma_from_b, vd_sigma, HarmonizationConfig,
    Lambda, LimitMapSpec, SigmaMode,
};

/// Step for the finite-difference Jacobian of the limit map.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Identity,
    /// diag(Q_k / π_k).
    Design,
    Bd,
    Vd,
}

impl SigmaChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SigmaChoice::Identity => "identity",
            SigmaChoice::Design => "design",
            SigmaChoice::Bd => "bd",
            SigmaChoice::Vd => "vd",
        }
    }
}

fn default_full() -> Lambda {
    Lambda::Full
}

fn default_bd() -> SigmaChoice {
    SigmaChoice::Bd
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Pooled {},
    RctOnly {},
    /// Treated trial mean minus the known control mean.
    Oracle {},
    Harmonized {
        #[serde(default = "default_full")]
        lambda: Lambda,
        #[serde(default = "default_bd")]
        sigma: SigmaChoice,
    },
    /// Mean of the cut distribution (continuous outcomes).
    Cut {},
    /// Logistic model with propensity-weighted external controls.
    Ipw {},
    /// Fully harmonized IPW estimate. `bd` falls back to `vd` when the bias
    /// direction is degenerate.
    HarmonizedIpw {
        #[serde(default = "default_bd")]
        sigma: SigmaChoice,
    },
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Pooled {} => "pooled".into(),
            EstimatorSpec::RctOnly {} => "rct_only".into(),
            EstimatorSpec::Oracle {} => "oracle".into(),
            EstimatorSpec::Harmonized { lambda, sigma } => format!("harmonized_{lambda}_{}", sigma.name()),
            EstimatorSpec::Cut {} => "cut".into(),
            EstimatorSpec::Ipw {} => "ipw".into(),
            EstimatorSpec::HarmonizedIpw { sigma } => format!("harmonized_ipw_{}", sigma.name()),
        }
    }

    pub fn is_harmonized(&self) -> bool {
        matches!(self, EstimatorSpec::Harmonized { .. } | EstimatorSpec::HarmonizedIpw { .. })
    }
}

/// Inputs shared by every estimator on one dataset.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub prevalence: PrevalenceSource,
    /// Known control means, for the oracle.
    pub mu_true: Option<Vec<f64>>,
    /// Variance of the normal priors behind the cut distribution.
    pub cut_prior_variance: f64,
}

impl Default for PipelineContext {
    fn default() -> Self {
        Self {
            prevalence: PrevalenceSource::RctEmpirical,
            mu_true: None,
            cut_prior_variance: FLAT_PRIOR_VARIANCE,
        }
    }
}

fn has_covariates(ds: &CombinedDataset) -> bool {
    ds.d() > 0
}

pub fn initial_estimate(ds: &CombinedDataset) -> Result<EffectEstimate> {
    match (ds.family(), has_covariates(ds)) {
        (OutcomeFamily::Continuous, false) => diff_means_pooled_subgroups(ds),
        (OutcomeFamily::Continuous, true) => ols_subgroup_effects(ds),
        (OutcomeFamily::Binary, _) => logistic_marginal_effects(ds, None),
    }
}

pub fn overall_estimate(ds: &CombinedDataset) -> Result<f64> {
    match (ds.family(), has_covariates(ds)) {
        (OutcomeFamily::Continuous, true) => ols_overall_effect(ds)?.overall_value(),
        _ => diff_means_overall(ds)?.overall_value(),
    }
}

pub fn rct_only_estimate(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let model = match (ds.family(), has_covariates(ds)) {
        (OutcomeFamily::Continuous, false) => RctModel::DiffMeans,
        (OutcomeFamily::Continuous, true) => RctModel::Ols,
        (OutcomeFamily::Binary, _) => RctModel::Logistic,
    };
    rct_only_subgroups(ds, model)
}

/// Residual variance of the outcome model with a separate EC mean shift per
/// subgroup.
pub fn residual_variance(ds: &CombinedDataset) -> Result<f64> {
    let v = if has_covariates(ds) {
        let design = build_design(ds, DesignModel::PooledSubgroupWithBias);
        let y: Vec<f64> = ds.rows().map(|r| r.outcome).collect();
        fit_ols(&design, &y, None)?.dispersion.unwrap_or(f64::NAN)
    } else {
        cell_residual_variance(ds, true)
    };
    if !v.is_finite() {
        return Err(HarmonizeError::InsufficientData("no residual degrees of freedom".into()));
    }
    Ok(v)
}

/// Everything produced by one harmonization.
#[derive(Debug, Clone)]
pub struct HarmonizedOutput {
    pub estimate: DVector<f64>,
    pub initial: EffectEstimate,
    pub theta_r: f64,
    pub pi: DVector<f64>,
    /// θ̂ʰ = θ̂ + (θ̂ʳ − πᵀθ̂)·u.
    pub u: DVector<f64>,
    /// Σ actually used (after any fallback).
    pub sigma: SigmaChoice,
    pub counts: DesignCounts,
}

fn bias_direction(ds: &CombinedDataset, pi: &DVector<f64>, ec_weights: Option<&[f64]>) -> Result<DVector<f64>> {
    match ds.family() {
        OutcomeFamily::Continuous => Ok(bd_direction_linear(ds, pi)?.0.b),
        OutcomeFamily::Binary => {
            let spec = LimitMapSpec::from_rct_fit(ds, ec_weights)?;
            Ok(bd_direction_glm(&spec, FD_STEP, pi)?.0.b)
        }
    }
}

fn harmonization_config(
    ds: &CombinedDataset,
    initial: &EffectEstimate,
    counts: &DesignCounts,
    lambda: Lambda,
    sigma: SigmaChoice,
    ec_weights: Option<&[f64]>,
) -> Result<HarmonizationConfig> {
    let k = ds.k();
    let pi = &counts.pi;
    let cfg = match sigma {
        SigmaChoice::Identity => HarmonizationConfig::new(lambda, DMatrix::identity(k, k)),
        SigmaChoice::Design => {
            let d = DVector::from_fn(k, |j, _| counts.q_diag[j] / pi[j]);
            HarmonizationConfig::new(lambda, DMatrix::from_diagonal(&d))
        }
        SigmaChoice::Vd => {
            let mut cfg = HarmonizationConfig::new(lambda, vd_sigma(initial)?);
            cfg.mode = SigmaMode::Vd;
            cfg
        }
        SigmaChoice::Bd => {
            let b = bias_direction(ds, pi, ec_weights)?;
            let mut cfg = HarmonizationConfig::new(lambda, solve_sigma_from_b(&b, pi)?);
            cfg.mode = SigmaMode::Bd;
            cfg
        }
    };
    Ok(cfg)
}

fn harmonize_from(
    ds: &CombinedDataset,
    initial: EffectEstimate,
    ctx: &PipelineContext,
    lambda: Lambda,
    sigma: SigmaChoice,
    ec_weights: Option<&[f64]>,
) -> Result<HarmonizedOutput> {
    let counts = compute_design_counts(ds, &ctx.prevalence)?;
    let theta_r = overall_estimate(ds)?;
    let cfg = harmonization_config(ds, &initial, &counts, lambda, sigma, ec_weights)?;
    let pi = counts.pi.clone();
    let theta = initial.theta()?;
    let u = if lambda == Lambda::Finite(0.0) {
        DVector::zeros(ds.k())
    } else {
        cfg.shift_direction(&pi)?
    };
    let estimate = theta + &u * (theta_r - pi.dot(theta));
    Ok(HarmonizedOutput {
        estimate,
        initial,
        theta_r,
        pi,
        u,
        sigma,
        counts,
    })
}

/// Harmonizes the family's default initial estimator.
pub fn harmonized(
    ds: &CombinedDataset,
    ctx: &PipelineContext,
    lambda: Lambda,
    sigma: SigmaChoice,
) -> Result<HarmonizedOutput> {
    let initial = initial_estimate(ds)?;
    harmonize_from(ds, initial, ctx, lambda, sigma, None)
}

/// Fully harmonizes the IPW logistic estimator.
pub fn harmonized_ipw(ds: &CombinedDataset, ctx: &PipelineContext, sigma: SigmaChoice) -> Result<HarmonizedOutput> {
    let w = ipw_row_weights(ds)?;
    let initial = ipw_estimate_with(ds, &w)?;
    let ec_w = &w[ds.rct().len()..];
    match harmonize_from(ds, initial.clone(), ctx, Lambda::Full, sigma, Some(ec_w)) {
        Err(HarmonizeError::DegenerateDirection { pi_dot_b }) if sigma == SigmaChoice::Bd => {
            log::debug!("bias direction degenerate (πᵀb = {pi_dot_b:.3e}); using the variance direction");
            harmonize_from(ds, initial, ctx, Lambda::Full, SigmaChoice::Vd, Some(ec_w))
        }
        other => other,
    }
}

fn ipw_estimate_with(ds: &CombinedDataset, w: &[f64]) -> Result<EffectEstimate> {
    let mut est = logistic_marginal_effects(ds, Some(w))?;
    est.method = crate::estimators::EstimatorMethod::IpwLogistic;
    Ok(est)
}

/// Trial-only and subgroup posteriors under flat priors with a common
/// noise variance, and the resulting cut distribution.
pub fn cut_posterior(ds: &CombinedDataset, ctx: &PipelineContext) -> Result<NormalPosterior> {
    if ds.family() != OutcomeFamily::Continuous {
        return Err(HarmonizeError::InvalidArgument("the cut distribution needs continuous outcomes".into()));
    }
    let phi2 = residual_variance(ds)?;
    let counts = compute_design_counts(ds, &ctx.prevalence)?;
    let m0 = build_design(ds, DesignModel::OverallRct);
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let p1 = analyst1_posterior(ds, &NormalPosterior::flat(m0.roles, ctx.cut_prior_variance), phi2)?;
    let p2 = analyst2_posterior(ds, &NormalPosterior::flat(m1.roles, ctx.cut_prior_variance), phi2)?;
    cut_distribution(&p1, &p2, &counts.pi)
}

/// Joint covariance of (initial subgroup effects, overall effect) at
/// residual variance φ̂², overall effect last.
pub fn joint_covariance(ds: &CombinedDataset, counts: &DesignCounts, phi2: f64) -> Result<DMatrix<f64>> {
    match (ds.family(), has_covariates(ds)) {
        (OutcomeFamily::Continuous, false) => diff_means_joint_covariance(counts, phi2),
        (OutcomeFamily::Continuous, true) => ols_joint_covariance(ds, phi2),
        (OutcomeFamily::Binary, _) => Err(HarmonizeError::InvalidArgument(
            "closed-form covariance is only available for continuous outcomes".into(),
        )),
    }
}

/// Covariance of a harmonized estimate, treating its direction as fixed.
pub fn harmonized_variance(ds: &CombinedDataset, out: &HarmonizedOutput) -> Result<DMatrix<f64>> {
    let phi2 = residual_variance(ds)?;
    let s = joint_covariance(ds, &out.counts, phi2)?;
    harmonized_covariance(&out.u, &out.pi, &s)
}

/// Point estimates of one estimator.
pub fn evaluate(ds: &CombinedDataset, spec: &EstimatorSpec, ctx: &PipelineContext) -> Result<DVector<f64>> {
    match *spec {
        EstimatorSpec::Pooled {} => Ok(initial_estimate(ds)?.theta()?.clone()),
        EstimatorSpec::RctOnly {} => Ok(rct_only_estimate(ds)?.theta()?.clone()),
        EstimatorSpec::Oracle {} => {
            if ds.family() != OutcomeFamily::Continuous || has_covariates(ds) {
                return Err(HarmonizeError::InvalidArgument(
                    "the oracle needs continuous outcomes without covariates".into(),
                ));
            }
            let mu = ctx
                .mu_true
                .as_ref()
                .ok_or_else(|| HarmonizeError::InvalidArgument("the oracle needs the true control means".into()))?;
            Ok(oracle_subgroups(ds, mu)?.theta()?.clone())
        }
        EstimatorSpec::Harmonized { lambda, sigma } => Ok(harmonized(ds, ctx, lambda, sigma)?.estimate),
        EstimatorSpec::Cut {} => Ok(cut_posterior(ds, ctx)?.subgroup_effects()?.0),
        EstimatorSpec::Ipw {} => {
            let w = ipw_row_weights(ds)?;
            Ok(ipw_estimate_with(ds, &w)?.theta()?.clone())
        }
        EstimatorSpec::HarmonizedIpw { sigma } => Ok(harmonized_ipw(ds, ctx, sigma)?.estimate),
    }
}

/// Runs the spec of a harmonized estimator and returns the full output.
pub fn harmonized_detail(
    ds: &CombinedDataset,
    spec: &EstimatorSpec,
    ctx: &PipelineContext,
) -> Result<HarmonizedOutput> {
    match *spec {
        EstimatorSpec::Harmonized { lambda, sigma } => harmonized(ds, ctx, lambda, sigma),
        EstimatorSpec::HarmonizedIpw { sigma } => harmonized_ipw(ds, ctx, sigma),
        _ => Err(HarmonizeError::InvalidArgument(format!("{} is not a harmonized estimator", spec.label()))),
    }
}

/// Builds one interval. Methods other than `rct_only` are centered on the
/// harmonized estimator `harmonized`; the bootstrap draws from `seed`.
pub fn interval(
    ds: &CombinedDataset,
    method: IntervalMethod,
    harmonized: Option<&EstimatorSpec>,
    ctx: &PipelineContext,
    alpha: f64,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<IntervalSet> {
    let need = || {
        harmonized.ok_or_else(|| {
            HarmonizeError::InvalidArgument(format!("{} intervals need a harmonized estimator", method.name()))
        })
    };
    match method {
        IntervalMethod::Analytic => {
            let out = harmonized_detail(ds, need()?, ctx)?;
            let v = harmonized_variance(ds, &out)?;
            analytic_interval(&out.estimate, &v, alpha)
        }
        IntervalMethod::Cut => cut_interval(&cut_posterior(ds, ctx)?, alpha),
        IntervalMethod::Bootstrap => {
            let h = need()?;
            if ds.d() > 0 {
                return Err(HarmonizeError::InvalidArgument(
                    "the parametric bootstrap model has no covariates".into(),
                ));
            }
            let params = SimpleModelParams::estimate(ds)?;
            bootstrap_interval(
                ds,
                |d| Ok(harmonized_detail(d, h, ctx)?.estimate),
                &params,
                bootstrap_reps,
                alpha,
                seed,
            )
        }
        IntervalMethod::RctOnly => rct_only_interval(ds, alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Study, SubjectRecord};

    fn balanced(k: usize, per_cell: usize, n_ec: usize, gamma: f64) -> CombinedDataset {
        let mut rct = Vec::new();
        let mut ec = Vec::new();
        for j in 0..k {
            for i in 0..per_cell {
                let noise = ((i * 37 + j * 11) % 7) as f64 / 7.0 - 0.4;
                rct.push(SubjectRecord::new(Study::Rct, j, 0, noise, vec![]));
                rct.push(SubjectRecord::new(Study::Rct, j, 1, 1.0 + j as f64 * 0.1 - noise, vec![]));
            }
            for i in 0..n_ec {
                let noise = ((i * 13 + j * 5) % 9) as f64 / 9.0 - 0.45;
                ec.push(SubjectRecord::new(Study::Ec, j, 0, gamma + noise, vec![]));
            }
        }
        let labels = (0..k).map(|i| format!("{}", i + 1)).collect();
        CombinedDataset::new(rct, ec, labels, 0, OutcomeFamily::Continuous).unwrap()
    }

    #[test]
    fn full_harmonization_matches_overall() {
        let ds = balanced(3, 6, 20, 0.7);
        let ctx = PipelineContext::default();
        for sigma in [SigmaChoice::Identity, SigmaChoice::Design, SigmaChoice::Bd, SigmaChoice::Vd] {
            let out = harmonized(&ds, &ctx, Lambda::Full, sigma).unwrap();
            assert!((out.pi.dot(&out.estimate) - out.theta_r).abs() < 1e-12, "{sigma:?}");
        }
    }

    #[test]
    fn design_sigma_equals_bias_direction_without_covariates() {
        let ds = balanced(3, 6, 20, 0.7);
        let ctx = PipelineContext::default();
        let a = harmonized(&ds, &ctx, Lambda::Full, SigmaChoice::Design).unwrap();
        let b = harmonized(&ds, &ctx, Lambda::Full, SigmaChoice::Bd).unwrap();
        assert!((a.estimate - b.estimate).amax() < 1e-10);
    }

    #[test]
    fn cut_mean_matches_variance_directed_harmonization() {
        let ds = balanced(3, 8, 25, 0.3);
        let ctx = PipelineContext::default();
        let cut = cut_posterior(&ds, &ctx).unwrap().subgroup_effects().unwrap().0;
        let vd = harmonized(&ds, &ctx, Lambda::Full, SigmaChoice::Vd).unwrap().estimate;
        // Flat priors with finite variance leave a small shrinkage gap.
        assert!((cut - vd).amax() < 1e-3);
    }

    #[test]
    fn labels_are_stable() {
        let s = EstimatorSpec::Harmonized { lambda: Lambda::Finite(10.0), sigma: SigmaChoice::Vd };
        assert_eq!(s.label(), "harmonized_10_vd");
        let parsed: EstimatorSpec = serde_json::from_str(r#"{"kind":"harmonized","lambda":"full"}"#).unwrap();
        assert_eq!(parsed.label(), "harmonized_full_bd");
        assert!(serde_json::from_str::<EstimatorSpec>(r#"{"kind":"pooled","extra":1}"#).is_err());
    }
}
