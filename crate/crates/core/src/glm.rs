//! Design matrices for the trial/external-control models, least squares via
//! QR, and weighted logistic regression by iteratively reweighted least
//! squares.

use nalgebra::{DMatrix, DVector};

use crate::data::{CombinedDataset, SubjectRecord};
use crate::error::{HarmonizeError, Result};

/// What a design column stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnRole {
    /// Overall control mean (μ).
    Intercept,
    /// Overall treatment effect (θ).
    Treatment,
    /// Subgroup control level μ_k (ν_k on the logit scale).
    SubgroupIntercept(usize),
    /// Subgroup treatment effect θ_k (η_k on the logit scale).
    SubgroupTreatment(usize),
    Covariate(usize),
    /// EC-membership × subgroup indicator (γ_k / δ_k).
    EcBias(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignModel {
    /// `[1, T, X]` on RCT rows only.
    OverallRct,
    /// Subgroup intercepts, subgroup × treatment, covariates; RCT then EC rows.
    PooledSubgroup,
    /// The pooled design followed by the EC bias block.
    PooledSubgroupWithBias,
    /// The EC bias block alone.
    BiasBlock,
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub roles: Vec<ColumnRole>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_of(&self, role: ColumnRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// Column indices of the subgroup treatment block in subgroup order.
    pub fn subgroup_treatment_columns(&self) -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = self
            .roles
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                ColumnRole::SubgroupTreatment(k) => Some((*k, i)),
                _ => None,
            })
            .collect();
        cols.sort();
        cols.into_iter().map(|(_, i)| i).collect()
    }

    /// Keeps the columns whose role satisfies `keep`.
    pub fn select(&self, keep: impl Fn(&ColumnRole) -> bool) -> DesignMatrix {
        let idx: Vec<usize> = (0..self.ncols()).filter(|&i| keep(&self.roles[i])).collect();
        DesignMatrix {
            values: self.values.select_columns(idx.iter()),
            roles: idx.iter().map(|&i| self.roles[i]).collect(),
        }
    }
}

/// Row of the pooled subgroup design `[e_k, T·e_k, X]`.
pub fn pooled_subgroup_row(r: &SubjectRecord, k: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    out[r.subgroup] = 1.0;
    if r.treatment == 1 {
        out[k + r.subgroup] = 1.0;
    }
    out[2 * k..].copy_from_slice(&r.covariates);
}

pub fn pooled_subgroup_roles(k: usize, d: usize) -> Vec<ColumnRole> {
    (0..k)
        .map(ColumnRole::SubgroupIntercept)
        .chain((0..k).map(ColumnRole::SubgroupTreatment))
        .chain((0..d).map(ColumnRole::Covariate))
        .collect()
}

pub fn build_design(ds: &CombinedDataset, model: DesignModel) -> DesignMatrix {
    let k = ds.k();
    let d = ds.d();
    match model {
        DesignModel::OverallRct => {
            let n = ds.rct().len();
            let mut values = DMatrix::zeros(n, 2 + d);
            for (i, r) in ds.rct().iter().enumerate() {
                values[(i, 0)] = 1.0;
                values[(i, 1)] = r.treatment as f64;
                for (j, &x) in r.covariates.iter().enumerate() {
                    values[(i, 2 + j)] = x;
                }
            }
            let roles = [ColumnRole::Intercept, ColumnRole::Treatment]
                .into_iter()
                .chain((0..d).map(ColumnRole::Covariate))
                .collect();
            DesignMatrix { values, roles }
        }
        DesignModel::PooledSubgroup => {
            let n = ds.n_rows();
            let p = 2 * k + d;
            let mut values = DMatrix::zeros(n, p);
            let mut row = vec![0.0; p];
            for (i, r) in ds.rows().enumerate() {
                pooled_subgroup_row(r, k, &mut row);
                for j in 0..p {
                    values[(i, j)] = row[j];
                }
            }
            DesignMatrix {
                values,
                roles: pooled_subgroup_roles(k, d),
            }
        }
        DesignModel::BiasBlock => {
            let n = ds.n_rows();
            let mut values = DMatrix::zeros(n, k);
            let offset = ds.rct().len();
            for (i, r) in ds.ec().iter().enumerate() {
                values[(offset + i, r.subgroup)] = 1.0;
            }
            DesignMatrix {
                values,
                roles: (0..k).map(ColumnRole::EcBias).collect(),
            }
        }
        DesignModel::PooledSubgroupWithBias => {
            let m1 = build_design(ds, DesignModel::PooledSubgroup);
            let m2 = build_design(ds, DesignModel::BiasBlock);
            let n = m1.nrows();
            let mut values = DMatrix::zeros(n, m1.ncols() + m2.ncols());
            values.columns_mut(0, m1.ncols()).copy_from(&m1.values);
            values.columns_mut(m1.ncols(), m2.ncols()).copy_from(&m2.values);
            let roles = m1.roles.into_iter().chain(m2.roles).collect();
            DesignMatrix { values, roles }
        }
    }
}

/// Result of a least-squares or logistic fit.
///
/// `information` is XᵀWX for OLS (per unit dispersion, so the coefficient
/// covariance is `dispersion · information⁻¹`) and the Fisher information
/// Xᵀdiag(w·g′(Xb))X for logistic fits.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    pub information: DMatrix<f64>,
    /// Residual variance RSS/(n − p); OLS only. NaN when n ≤ p.
    pub dispersion: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each accepted IRLS step (empty for OLS).
    pub loglik_trace: Vec<f64>,
}

impl GlmFit {
    /// Coefficient covariance estimate.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let inv = spd_inverse(&self.information)?;
        Ok(match self.dispersion {
            Some(phi2) => inv * phi2,
            None => inv,
        })
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(HarmonizeError::RankDeficient { ratio: 0.0 })?;
    Ok(chol.inverse())
}

const RANK_TOL: f64 = 1e-10;

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() == 0 {
        return Ok(());
    }
    if x.nrows() < x.ncols() {
        return Err(HarmonizeError::RankDeficient { ratio: 0.0 });
    }
    let sv = x.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < RANK_TOL * max {
        return Err(HarmonizeError::RankDeficient {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    Ok(())
}

/// Least-squares solution of `x b = y` through a thin QR factorization.
/// Accepts several right-hand sides as columns of `y`.
pub fn qr_solve(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rank(x)?;
    let qr = x.clone().qr();
    let qty = qr.q().tr_mul(y);
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or(HarmonizeError::RankDeficient { ratio: 0.0 })
}

/// (Weighted) ordinary least squares.
pub fn fit_ols(design: &DesignMatrix, y: &[f64], weights: Option<&[f64]>) -> Result<GlmFit> {
    let n = design.nrows();
    let p = design.ncols();
    if y.len() != n {
        return Err(HarmonizeError::DimensionMismatch(format!("{} outcomes for {n} design rows", y.len())));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(HarmonizeError::DimensionMismatch(format!("{} weights for {n} design rows", w.len())));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(HarmonizeError::InvalidArgument("weights must be non-negative".into()));
        }
    }
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let mut xw = design.values.clone();
    for (i, s) in sw.iter().enumerate() {
        xw.row_mut(i).scale_mut(*s);
    }
    let yw = DMatrix::from_iterator(n, 1, y.iter().zip(&sw).map(|(v, s)| v * s));
    let beta = qr_solve(&xw, &yw)?.column(0).into_owned();
    let resid = yw.column(0) - &xw * &beta;
    let rss = resid.norm_squared();
    let n_eff = sw.iter().filter(|&&s| s > 0.0).count();
    let dispersion = if n_eff > p { rss / (n_eff - p) as f64 } else { f64::NAN };
    Ok(GlmFit {
        coefficients: beta,
        information: xw.tr_mul(&xw),
        dispersion: Some(dispersion),
        converged: true,
        iterations: 1,
        loglik_trace: Vec::new(),
    })
}

/// Logistic function g(x) = 1 / (1 + e^{-x}).
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative g′(x) = g(x)(1 − g(x)).
pub fn logistic_deriv(x: f64) -> f64 {
    let p = logistic(x);
    p * (1.0 - p)
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    /// Convergence threshold on the ∞-norm of the weighted score.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Largest admissible |coefficient| on the logit scale before the data
    /// are declared separated.
    pub coef_cap: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            max_halvings: 20,
            coef_cap: 30.0,
        }
    }
}

/// Weighted logistic regression for binary outcomes.
pub fn fit_logistic_irls(design: &DesignMatrix, y: &[f64], weights: &[f64], opts: &IrlsOptions) -> Result<GlmFit> {
    if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(HarmonizeError::InvalidArgument(format!("logistic outcome {bad} is not 0/1")));
    }
    fit_logistic_fractional(&design.values, y, weights, opts, None)
}

/// Logistic IRLS allowing responses in [0, 1]. Fractional responses arise
/// when the expected log-likelihood under another distribution is
/// maximized.
pub fn fit_logistic_fractional(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    opts: &IrlsOptions,
    start: Option<&DVector<f64>>,
) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || weights.len() != n {
        return Err(HarmonizeError::DimensionMismatch(format!(
            "{} outcomes and {} weights for {n} design rows",
            y.len(),
            weights.len()
        )));
    }
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(HarmonizeError::InvalidArgument("logistic responses must lie in [0, 1]".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(HarmonizeError::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let mut beta = match start {
        Some(b) if b.len() == p => b.clone(),
        Some(b) => {
            return Err(HarmonizeError::DimensionMismatch(format!("start has length {}, expected {p}", b.len())))
        }
        None => DVector::zeros(p),
    };

    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        eta.iter()
            .zip(y)
            .zip(weights)
            .map(|((&e, &yi), &w)| if w > 0.0 { w * (yi * e - softplus(e)) } else { 0.0 })
            .sum()
    };

    let mut ll = loglik(&beta);
    let mut trace = vec![ll];
    let mut xw = x.clone();
    let mut resid = DVector::zeros(n);

    for iter in 0..=opts.max_iter {
        let eta = x * &beta;
        for i in 0..n {
            let mu = logistic(eta[i]);
            let v = weights[i] * mu * (1.0 - mu);
            resid[i] = weights[i] * (y[i] - mu);
            let s = v.sqrt();
            for j in 0..p {
                xw[(i, j)] = x[(i, j)] * s;
            }
        }
        let score = x.tr_mul(&resid);
        let info = xw.tr_mul(&xw);
        let max_score = score.amax();
        if max_score < opts.tol {
            // Under separation the score vanishes only because fitted
            // probabilities saturate, leaving a flat information direction.
            let total_w: f64 = weights.iter().sum();
            let min_eig = info.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < 1e-8 * total_w.max(1.0) {
                return Err(HarmonizeError::SeparationDetected {
                    iterations: iter,
                    max_coef: beta.amax(),
                });
            }
            return Ok(GlmFit {
                coefficients: beta,
                information: info,
                dispersion: None,
                converged: true,
                iterations: iter,
                loglik_trace: trace,
            });
        }
        if iter == opts.max_iter {
            return Err(HarmonizeError::NotConverged {
                iterations: iter,
                score: max_score,
            });
        }
        let step = match info.clone().cholesky() {
            Some(chol) => chol.solve(&score),
            None => {
                // Information can lose definiteness numerically as fitted
                // probabilities saturate, which is how separation shows up.
                if beta.amax() > opts.coef_cap * 0.5 {
                    return Err(HarmonizeError::SeparationDetected {
                        iterations: iter,
                        max_coef: beta.amax(),
                    });
                }
                return Err(HarmonizeError::RankDeficient { ratio: 0.0 });
            }
        };
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut ll_new = loglik(&candidate);
        let mut halvings = 0;
        while !(ll_new >= ll - 1e-12 * ll.abs().max(1.0)) && halvings < opts.max_halvings {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            ll_new = loglik(&candidate);
            halvings += 1;
        }
        beta = candidate;
        ll = ll_new;
        trace.push(ll);
        if beta.amax() > opts.coef_cap {
            return Err(HarmonizeError::SeparationDetected {
                iterations: iter + 1,
                max_coef: beta.amax(),
            });
        }
    }
    unreachable!("loop returns on the final iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{OutcomeFamily, Study};
    use proptest::prelude::*;

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DesignMatrix {
        DesignMatrix {
            values: DMatrix::from_row_slice(rows, cols, data),
            roles: (0..cols).map(ColumnRole::Covariate).collect(),
        }
    }

    #[test]
    fn exact_linear_fit() {
        let x = dm(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let fit = fit_ols(&x, &[2.0, 4.0, 6.0, 8.0], None).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(fit.dispersion.unwrap().abs() < 1e-20);
    }

    #[test]
    fn intercept_only_is_the_mean() {
        let x = dm(2, 1, &[1.0, 1.0]);
        let fit = fit_ols(&x, &[1.0, 3.0], None).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = dm(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let err = fit_ols(&x, &[1.0, 2.0, 3.0], None).unwrap_err();
        assert!(matches!(err, HarmonizeError::RankDeficient { .. }));
    }

    #[test]
    fn logistic_intercept_three_of_four() {
        let x = dm(4, 1, &[1.0; 4]);
        let fit = fit_logistic_irls(&x, &[1.0, 1.0, 1.0, 0.0], &[1.0; 4], &IrlsOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn logistic_intercept_two_of_four() {
        let x = dm(4, 1, &[1.0; 4]);
        let fit = fit_logistic_irls(&x, &[1.0, 0.0, 1.0, 0.0], &[1.0; 4], &IrlsOptions::default()).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn separated_data_detected() {
        let x = dm(6, 2, &[1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err = fit_logistic_irls(&x, &y, &[1.0; 6], &IrlsOptions::default()).unwrap_err();
        assert!(matches!(err, HarmonizeError::SeparationDetected { .. }), "{err:?}");
    }

    #[test]
    fn zero_weight_rows_contribute_nothing() {
        let x = dm(6, 1, &[1.0; 6]);
        let y = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let w = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = fit_logistic_irls(&x, &y, &w, &IrlsOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn non_binary_outcome_rejected() {
        let x = dm(2, 1, &[1.0, 1.0]);
        assert!(fit_logistic_irls(&x, &[0.5, 1.0], &[1.0, 1.0], &IrlsOptions::default()).is_err());
    }

    fn small_dataset() -> CombinedDataset {
        let rct = vec![
            SubjectRecord::new(Study::Rct, 0, 0, 1.0, vec![0.5]),
            SubjectRecord::new(Study::Rct, 1, 1, 2.0, vec![-1.0]),
            SubjectRecord::new(Study::Rct, 0, 1, 3.0, vec![2.0]),
        ];
        let ec = vec![
            SubjectRecord::new(Study::Ec, 1, 0, 0.0, vec![1.5]),
            SubjectRecord::new(Study::Ec, 0, 0, 1.0, vec![0.0]),
        ];
        CombinedDataset::new(rct, ec, vec!["a".into(), "b".into()], 1, OutcomeFamily::Continuous).unwrap()
    }

    #[test]
    fn pooled_and_bias_blocks_by_hand() {
        let ds = small_dataset();
        let m1 = build_design(&ds, DesignModel::PooledSubgroup);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(5, 5, &[
            1.0, 0.0, 0.0, 0.0, 0.5,
            0.0, 1.0, 0.0, 1.0, -1.0,
            1.0, 0.0, 1.0, 0.0, 2.0,
            0.0, 1.0, 0.0, 0.0, 1.5,
            1.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        assert_eq!(m1.values, expected);
        let m2 = build_design(&ds, DesignModel::BiasBlock);
        #[rustfmt::skip]
        let expected2 = DMatrix::from_row_slice(5, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            0.0, 0.0,
            0.0, 1.0,
            1.0, 0.0,
        ]);
        assert_eq!(m2.values, expected2);
        let full = build_design(&ds, DesignModel::PooledSubgroupWithBias);
        assert_eq!(full.ncols(), 7);
        assert_eq!(m1.subgroup_treatment_columns(), vec![2, 3]);
    }

    #[test]
    fn overall_design_layout() {
        let rct = (0..4)
            .map(|i| SubjectRecord::new(Study::Rct, 0, (i % 2) as u8, 0.0, vec![i as f64]))
            .collect();
        let ds = CombinedDataset::new(rct, vec![], vec!["x".into()], 1, OutcomeFamily::Continuous).unwrap();
        let m0 = build_design(&ds, DesignModel::OverallRct);
        assert_eq!((m0.nrows(), m0.ncols()), (4, 3));
        assert_eq!(m0.values.row(3).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 3.0]);
    }

    #[test]
    fn minimal_pooled_design() {
        let rct = vec![
            SubjectRecord::new(Study::Rct, 0, 0, 0.0, vec![]),
            SubjectRecord::new(Study::Rct, 0, 1, 0.0, vec![]),
        ];
        let ec = vec![SubjectRecord::new(Study::Ec, 0, 0, 0.0, vec![])];
        let ds = CombinedDataset::new(rct, ec, vec!["x".into()], 0, OutcomeFamily::Continuous).unwrap();
        let m1 = build_design(&ds, DesignModel::PooledSubgroup);
        assert_eq!(m1.values, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]));
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn ols_normal_equations(seed in any::<u64>(), n in 8usize..40, p in 1usize..5) {
            let mut u = lcg(seed);
            let x = DMatrix::from_fn(n, p, |_, _| u());
            let y: Vec<f64> = (0..n).map(|_| u()).collect();
            let w: Vec<f64> = (0..n).map(|_| u() + 0.6).collect();
            let design = DesignMatrix { values: x.clone(), roles: (0..p).map(ColumnRole::Covariate).collect() };
            let fit = fit_ols(&design, &y, Some(&w)).unwrap();
            let r = DVector::from_iterator(n, (0..n).map(|i| w[i] * (y[i] - (x.row(i) * &fit.coefficients)[0])));
            let ne = x.tr_mul(&r);
            prop_assert!(ne.amax() < 1e-8);
        }

        #[test]
        fn irls_score_and_monotone_loglik(seed in any::<u64>(), n in 30usize..80) {
            let mut u = lcg(seed);
            let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { 2.0 * u() });
            let y: Vec<f64> = (0..n).map(|i| {
                let eta = 0.3 + x[(i, 1)] - 0.5 * x[(i, 2)];
                if u() + 0.5 < logistic(eta) { 1.0 } else { 0.0 }
            }).collect();
            let w: Vec<f64> = (0..n).map(|_| u() + 1.0).collect();
            let design = DesignMatrix { values: x.clone(), roles: (0..3).map(ColumnRole::Covariate).collect() };
            let opts = IrlsOptions::default();
            match fit_logistic_irls(&design, &y, &w, &opts) {
                Ok(fit) => {
                    let mut r = DVector::zeros(n);
                    for i in 0..n {
                        r[i] = w[i] * (y[i] - logistic((x.row(i) * &fit.coefficients)[0]));
                    }
                    prop_assert!(x.tr_mul(&r).amax() < opts.tol);
                    for pair in fit.loglik_trace.windows(2) {
                        prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
                    }
                    let eig = fit.information.clone().symmetric_eigen().eigenvalues;
                    prop_assert!(eig.min() >= -1e-10);
                }
                Err(HarmonizeError::SeparationDetected { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e:?}"),
            }
        }
    }
}
