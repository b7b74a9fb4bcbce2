//! Initial effect estimators: difference of means, OLS, pooled / weighted
//! logistic marginal effects, and the propensity model used for EC weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedDataset, DesignCounts, OutcomeFamily, Study, SubjectRecord};
use crate::error::{HarmonizeError, Result};
use crate::glm::{
    build_design, fit_logistic_irls, fit_ols, logistic, logistic_deriv, spd_inverse, ColumnRole,
    DesignMatrix, DesignModel, IrlsOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    DiffMeans,
    Ols,
    LogisticMarginal,
    IpwLogistic,
    Oracle,
    External,
    Harmonized,
    Cut,
}

/// A vector of subgroup effects and/or an overall effect.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub theta_k: Option<DVector<f64>>,
    pub theta_overall: Option<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub method: EstimatorMethod,
    pub uses_ec: bool,
}

impl EffectEstimate {
    pub fn subgroups(theta: DVector<f64>, method: EstimatorMethod, uses_ec: bool) -> Self {
        Self {
            theta_k: Some(theta),
            theta_overall: None,
            covariance: None,
            method,
            uses_ec,
        }
    }

    pub fn overall(value: f64, method: EstimatorMethod) -> Self {
        Self {
            theta_k: None,
            theta_overall: Some(value),
            covariance: None,
            method,
            uses_ec: false,
        }
    }

    /// Wraps a subgroup vector produced elsewhere (Bayesian models, other
    /// software) so it can be harmonized.
    pub fn external(theta: DVector<f64>, covariance: Option<DMatrix<f64>>, uses_ec: bool) -> Result<Self> {
        if let Some(c) = &covariance {
            check_covariance(c, theta.len())?;
        }
        Ok(Self {
            theta_k: Some(theta),
            theta_overall: None,
            covariance,
            method: EstimatorMethod::External,
            uses_ec,
        })
    }

    pub fn with_covariance(mut self, cov: DMatrix<f64>) -> Self {
        self.covariance = Some(cov);
        self
    }

    pub fn theta(&self) -> Result<&DVector<f64>> {
        self.theta_k
            .as_ref()
            .ok_or_else(|| HarmonizeError::InconsistentDimensions("estimate has no subgroup effects".into()))
    }

    pub fn overall_value(&self) -> Result<f64> {
        self.theta_overall
            .ok_or_else(|| HarmonizeError::InconsistentDimensions("estimate has no overall effect".into()))
    }
}

fn check_covariance(c: &DMatrix<f64>, k: usize) -> Result<()> {
    if c.nrows() != k || c.ncols() != k {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "covariance is {}x{}, expected {k}x{k}",
            c.nrows(),
            c.ncols()
        )));
    }
    let scale = c.amax().max(1.0);
    if (c - c.transpose()).amax() > 1e-10 * scale {
        return Err(HarmonizeError::InvalidArgument("covariance is not symmetric".into()));
    }
    let min = c.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(HarmonizeError::InvalidArgument("covariance is not positive semidefinite".into()));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Ȳ₁ − Ȳ₀ on the RCT.
pub fn diff_means_overall(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let mut acc = [(0.0f64, 0usize); 2];
    for r in ds.rct() {
        acc[r.treatment as usize].0 += r.outcome;
        acc[r.treatment as usize].1 += 1;
    }
    if acc[1].1 == 0 {
        return Err(HarmonizeError::EmptyArm { arm: "experimental" });
    }
    if acc[0].1 == 0 {
        return Err(HarmonizeError::EmptyArm { arm: "control" });
    }
    let value = acc[1].0 / acc[1].1 as f64 - acc[0].0 / acc[0].1 as f64;
    Ok(EffectEstimate::overall(value, EstimatorMethod::DiffMeans))
}

/// Treated RCT mean minus the mean of RCT and EC controls, per subgroup.
/// The covariance uses the residual variance of the cell-means model.
pub fn diff_means_pooled_subgroups(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let k = ds.k();
    // (sum, count) per subgroup for treated RCT rows and for all controls
    let mut acc = vec![[(0.0f64, 0usize); 2]; k];
    for r in ds.rows() {
        let a = &mut acc[r.subgroup][r.treatment as usize];
        a.0 += r.outcome;
        a.1 += 1;
    }
    let mut theta = DVector::zeros(k);
    let mut var_factor = DVector::zeros(k);
    for (j, [c, t]) in acc.iter().enumerate() {
        if t.1 == 0 {
            return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "experimental" });
        }
        if c.1 == 0 {
            return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "control" });
        }
        theta[j] = t.0 / t.1 as f64 - c.0 / c.1 as f64;
        var_factor[j] = 1.0 / t.1 as f64 + 1.0 / c.1 as f64;
    }
    let phi2 = cell_residual_variance(ds, false);
    let mut est = EffectEstimate::subgroups(theta, EstimatorMethod::DiffMeans, !ds.ec().is_empty());
    if phi2.is_finite() {
        est.covariance = Some(DMatrix::from_diagonal(&(var_factor * phi2)));
    }
    Ok(est)
}

/// Pooled within-cell variance. Cells are (subgroup, arm) on the RCT; EC rows
/// join the RCT control cell unless `separate_ec` is set, in which case they
/// form their own cell per subgroup. NaN when there are no residual degrees
/// of freedom.
pub fn cell_residual_variance(ds: &CombinedDataset, separate_ec: bool) -> f64 {
    let k = ds.k();
    // (sum, sum of squares, count) per cell: [k][0..3] = rct control, rct treated, ec
    let mut acc = vec![[(0.0f64, 0.0f64, 0usize); 3]; k];
    for r in ds.rows() {
        let cell = match (r.study, r.treatment) {
            (Study::Ec, _) if separate_ec => 2,
            (_, 1) => 1,
            _ => 0,
        };
        let a = &mut acc[r.subgroup][cell];
        a.0 += r.outcome;
        a.1 += r.outcome * r.outcome;
        a.2 += 1;
    }
    let mut ss = 0.0;
    let mut n = 0usize;
    let mut cells = 0usize;
    for sub in &acc {
        for &(s, s2, c) in sub {
            if c > 0 {
                let m = s / c as f64;
                ss += (s2 - c as f64 * m * m).max(0.0);
                n += c;
                cells += 1;
            }
        }
    }
    if n > cells {
        ss / (n - cells) as f64
    } else {
        f64::NAN
    }
}

/// Which model to use for RCT-only subgroup estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RctModel {
    DiffMeans,
    Ols,
    Logistic,
}

/// Subgroup effects from trial rows only.
pub fn rct_only_subgroups(ds: &CombinedDataset, model: RctModel) -> Result<EffectEstimate> {
    let rct = ds.rct_only();
    match model {
        RctModel::DiffMeans => diff_means_pooled_subgroups(&rct),
        RctModel::Ols => ols_subgroup_effects(&rct),
        RctModel::Logistic => logistic_marginal_effects(&rct, None),
    }
}

/// Treated RCT mean minus a known control mean, per subgroup.
pub fn oracle_subgroups(ds: &CombinedDataset, mu_true: &[f64]) -> Result<EffectEstimate> {
    if mu_true.len() != ds.k() {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "{} control means for {} subgroups",
            mu_true.len(),
            ds.k()
        )));
    }
    let theta = (0..ds.k())
        .map(|j| {
            mean(ds.rct_outcomes(j, 1))
                .map(|m| m - mu_true[j])
                .ok_or(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "experimental" })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectEstimate::subgroups(DVector::from_vec(theta), EstimatorMethod::Oracle, false))
}

fn outcomes(ds: &CombinedDataset) -> Vec<f64> {
    ds.rows().map(|r| r.outcome).collect()
}

/// θ block of the pooled OLS fit, with covariance φ̂²[(M₁ᵀM₁)⁻¹]_θθ.
pub fn ols_subgroup_effects(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let fit = fit_ols(&m1, &outcomes(ds), None)?;
    let cols = m1.subgroup_treatment_columns();
    let theta = DVector::from_iterator(cols.len(), cols.iter().map(|&c| fit.coefficients[c]));
    let cov = fit.covariance()?.select_rows(cols.iter()).select_columns(cols.iter());
    let mut est = EffectEstimate::subgroups(theta, EstimatorMethod::Ols, !ds.ec().is_empty());
    if cov.iter().all(|v| v.is_finite()) {
        est.covariance = Some(cov);
    }
    Ok(est)
}

/// Treatment coefficient of `[1, T, X]` fitted on RCT rows.
pub fn ols_overall_effect(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let m0 = build_design(ds, DesignModel::OverallRct);
    let y: Vec<f64> = ds.rct().iter().map(|r| r.outcome).collect();
    let fit = fit_ols(&m0, &y, None)?;
    Ok(EffectEstimate::overall(fit.coefficients[1], EstimatorMethod::Ols))
}

/// Joint covariance of (pooled subgroup OLS θ̂, overall OLS θ̂) given the
/// designs, as a (K+1)×(K+1) matrix with the overall effect last.
pub fn ols_joint_covariance(ds: &CombinedDataset, phi2: f64) -> Result<DMatrix<f64>> {
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let m0 = build_design(ds, DesignModel::OverallRct);
    let nr = m0.nrows();
    let g1 = spd_inverse(&(m1.values.transpose() * &m1.values))?;
    let g0 = spd_inverse(&(m0.values.transpose() * &m0.values))?;
    let cols = m1.subgroup_treatment_columns();
    // RCT rows come first in M1 and line up with the rows of M0.
    let cross_xx = m1.values.rows(0, nr).transpose() * &m0.values;
    let cross = g1.select_rows(cols.iter()) * cross_xx * g0.column(1) * phi2;
    let k = cols.len();
    let mut s = DMatrix::zeros(k + 1, k + 1);
    s.view_mut((0, 0), (k, k))
        .copy_from(&(g1.select_rows(cols.iter()).select_columns(cols.iter()) * phi2));
    for i in 0..k {
        s[(i, k)] = cross[i];
        s[(k, i)] = cross[i];
    }
    s[(k, k)] = g0[(1, 1)] * phi2;
    Ok(s)
}

/// Exact joint covariance of (pooled subgroup difference of means, overall
/// RCT difference of means) under homoscedastic outcomes with variance φ².
pub fn diff_means_joint_covariance(dc: &DesignCounts, phi2: f64) -> Result<DMatrix<f64>> {
    let k = dc.k();
    let n1 = dc.n_arm(1, Study::Rct) as f64;
    let n0 = dc.n_arm(0, Study::Rct) as f64;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(HarmonizeError::InvalidDesign("an RCT arm is empty".into()));
    }
    let mut s = DMatrix::zeros(k + 1, k + 1);
    for j in 0..k {
        let nk1 = dc.n(j, 1, Study::Rct) as f64;
        let nk0r = dc.n(j, 0, Study::Rct) as f64;
        let nk0 = dc.n_control_pooled(j) as f64;
        if nk1 == 0.0 || nk0 == 0.0 {
            return Err(HarmonizeError::InvalidDesign(format!("subgroup {j} has an empty cell")));
        }
        s[(j, j)] = phi2 * (1.0 / nk1 + 1.0 / nk0);
        let cross = phi2 * (1.0 / n1 + nk0r / (n0 * nk0));
        s[(j, k)] = cross;
        s[(k, j)] = cross;
    }
    s[(k, k)] = phi2 * (1.0 / n1 + 1.0 / n0);
    Ok(s)
}

/// Subgroup effects on the probability scale averaged over the RCT rows of
/// each subgroup, plus their gradient with respect to the coefficients
/// (ν, η, β) of the pooled logistic model.
pub fn marginal_effects(coef: &DVector<f64>, rct: &[SubjectRecord], k: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = coef.len();
    let d = p - 2 * k;
    let mut theta = DVector::zeros(k);
    let mut grad = DMatrix::zeros(k, p);
    let mut counts = vec![0usize; k];
    for r in rct {
        let j = r.subgroup;
        let xb: f64 = (0..d).map(|i| coef[2 * k + i] * r.covariates[i]).sum();
        let a = coef[j] + coef[k + j] + xb;
        let c = coef[j] + xb;
        theta[j] += logistic(a) - logistic(c);
        let (ga, gc) = (logistic_deriv(a), logistic_deriv(c));
        grad[(j, j)] += ga - gc;
        grad[(j, k + j)] += ga;
        for i in 0..d {
            grad[(j, 2 * k + i)] += (ga - gc) * r.covariates[i];
        }
        counts[j] += 1;
    }
    for j in 0..k {
        if counts[j] == 0 {
            return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm: "RCT" });
        }
        let inv = 1.0 / counts[j] as f64;
        theta[j] *= inv;
        grad.row_mut(j).scale_mut(inv);
    }
    Ok((theta, grad))
}

fn check_binary(ds: &CombinedDataset) -> Result<()> {
    if ds.family() != OutcomeFamily::Binary {
        return Err(HarmonizeError::InvalidArgument("logistic estimators need binary outcomes".into()));
    }
    Ok(())
}

fn check_subgroup_arms(ds: &CombinedDataset) -> Result<()> {
    for j in 0..ds.k() {
        for (t, arm) in [(1u8, "experimental"), (0, "control")] {
            if ds.rct().iter().all(|r| r.subgroup != j || r.treatment != t) {
                return Err(HarmonizeError::EmptySubgroupArm { subgroup: j, arm });
            }
        }
    }
    Ok(())
}

/// Pooled logistic fit on `[subgroup intercepts, subgroup × T, X]` and the
/// marginal subgroup effects. `weights` covers all rows (RCT then EC); when
/// absent the records' own weights are used. The covariance is the delta
/// method applied to the inverse Fisher information.
pub fn logistic_marginal_effects(ds: &CombinedDataset, weights: Option<&[f64]>) -> Result<EffectEstimate> {
    check_binary(ds)?;
    check_subgroup_arms(ds)?;
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => ds.rows().map(|r| r.weight).collect(),
    };
    let fit = fit_logistic_irls(&m1, &outcomes(ds), &w, &IrlsOptions::default())?;
    let (theta, grad) = marginal_effects(&fit.coefficients, ds.rct(), ds.k())?;
    let cov = &grad * spd_inverse(&fit.information)? * grad.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    let uses_ec = ds.ec().iter().zip(&w[ds.rct().len()..]).any(|(_, &wi)| wi > 0.0);
    Ok(EffectEstimate {
        theta_k: Some(theta),
        theta_overall: None,
        covariance: Some(cov),
        method: EstimatorMethod::LogisticMarginal,
        uses_ec,
    })
}

/// Overall effect on the probability scale from `[1, T, X]` fitted to RCT
/// rows, averaged over all RCT rows.
pub fn logistic_overall_effect(ds: &CombinedDataset) -> Result<EffectEstimate> {
    check_binary(ds)?;
    let m0 = build_design(ds, DesignModel::OverallRct);
    let y: Vec<f64> = ds.rct().iter().map(|r| r.outcome).collect();
    let fit = fit_logistic_irls(&m0, &y, &vec![1.0; y.len()], &IrlsOptions::default())?;
    let b = &fit.coefficients;
    let mut total = 0.0;
    for (i, _) in ds.rct().iter().enumerate() {
        let row = m0.values.row(i);
        let base: f64 = b[0] + (2..b.len()).map(|j| b[j] * row[j]).sum::<f64>();
        total += logistic(base + b[1]) - logistic(base);
    }
    Ok(EffectEstimate::overall(total / y.len() as f64, EstimatorMethod::LogisticMarginal))
}

/// Logistic model of RCT membership given subgroup and covariates.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub coefficients: DVector<f64>,
    /// Fitted probability of RCT membership for each EC record.
    pub rho_ec: Vec<f64>,
    /// Scale making the largest EC weight exactly one.
    pub zeta: f64,
    log_odds_ec: Vec<f64>,
}

fn membership_design(ds: &CombinedDataset) -> DesignMatrix {
    let k = ds.k();
    let d = ds.d();
    let n = ds.n_rows();
    let mut values = DMatrix::zeros(n, k + d);
    for (i, r) in ds.rows().enumerate() {
        values[(i, r.subgroup)] = 1.0;
        for (j, &x) in r.covariates.iter().enumerate() {
            values[(i, k + j)] = x;
        }
    }
    let roles = (0..k)
        .map(ColumnRole::SubgroupIntercept)
        .chain((0..d).map(ColumnRole::Covariate))
        .collect();
    DesignMatrix { values, roles }
}

pub fn fit_propensity(ds: &CombinedDataset) -> Result<PropensityModel> {
    if ds.rct().is_empty() || ds.ec().is_empty() {
        return Err(HarmonizeError::InsufficientData("propensity model needs both studies".into()));
    }
    let design = membership_design(ds);
    let y: Vec<f64> = ds.rows().map(|r| if r.study == Study::Rct { 1.0 } else { 0.0 }).collect();
    let fit = fit_logistic_irls(&design, &y, &vec![1.0; y.len()], &IrlsOptions::default())?;
    let offset = ds.rct().len();
    let log_odds_ec: Vec<f64> = (0..ds.ec().len())
        .map(|i| (design.values.row(offset + i) * &fit.coefficients)[0])
        .collect();
    let max = log_odds_ec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PropensityModel {
        rho_ec: log_odds_ec.iter().map(|&e| logistic(e)).collect(),
        zeta: (-max).exp(),
        coefficients: fit.coefficients,
        log_odds_ec,
    })
}

/// EC weights ζ·ρ̂/(1 − ρ̂), computed on the log scale so the largest is 1.
pub fn ec_weights(pm: &PropensityModel) -> Vec<f64> {
    let max = pm.log_odds_ec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    pm.log_odds_ec.iter().map(|&e| (e - max).exp()).collect()
}

/// Full weight vector (RCT ones, then EC propensity weights).
pub fn ipw_row_weights(ds: &CombinedDataset) -> Result<Vec<f64>> {
    let pm = fit_propensity(ds)?;
    let mut w = vec![1.0; ds.rct().len()];
    w.extend(ec_weights(&pm));
    Ok(w)
}

/// Logistic marginal effects with propensity-weighted external controls.
pub fn weighted_logistic_effects(ds: &CombinedDataset) -> Result<EffectEstimate> {
    let w = ipw_row_weights(ds)?;
    let mut est = logistic_marginal_effects(ds, Some(&w))?;
    est.method = EstimatorMethod::IpwLogistic;
    Ok(est)
}
