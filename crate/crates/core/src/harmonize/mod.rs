//! Harmonization of subgroup estimates with an overall trial estimate, the
//! choice of Σ (fixed, bias-directed, variance-directed), and closed-form
//! bias / variance under the cell-means design.

mod limit;

pub use limit::{bd_direction_glm, limit_map_theta, LimitMapSpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedDataset, DesignCounts, Study};
use crate::error::{HarmonizeError, Result};
use crate::estimators::{EffectEstimate, EstimatorMethod};
use crate::glm::{build_design, qr_solve, DesignModel};

/// Penalty weight; `Full` forces the prevalence-weighted average of the
/// output to equal the overall estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Full,
}

impl Lambda {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") || s.eq_ignore_ascii_case("inf") {
            return Ok(Lambda::Full);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| HarmonizeError::InvalidArgument(format!("lambda must be a number or \"full\", got {s:?}")))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(HarmonizeError::InvalidArgument(format!("lambda must be finite and >= 0, got {v}")));
        }
        Ok(Lambda::Finite(v))
    }

    /// Shrinkage scale cλ/(λ + c), equal to c at `Full`.
    pub fn scale(&self, c: f64) -> f64 {
        match *self {
            Lambda::Full => c,
            Lambda::Finite(l) => c * l / (l + c),
        }
    }
}

impl std::fmt::Display for Lambda {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Lambda::Full => write!(f, "full"),
            Lambda::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Full => s.serialize_str("full"),
            Lambda::Finite(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Lambda::parse(&v.to_string()).map_err(serde::de::Error::custom),
            Raw::Str(s) => Lambda::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Fixed,
    Bd,
    Vd,
}

#[derive(Debug, Clone)]
pub struct HarmonizationConfig {
    pub lambda: Lambda,
    pub sigma: Option<DMatrix<f64>>,
    pub mode: SigmaMode,
    /// Direction u with πᵀu = 1; only meaningful with `Lambda::Full`.
    pub direction: Option<DVector<f64>>,
}

impl HarmonizationConfig {
    pub fn new(lambda: Lambda, sigma: DMatrix<f64>) -> Self {
        Self {
            lambda,
            sigma: Some(sigma),
            mode: SigmaMode::Fixed,
            direction: None,
        }
    }

    pub fn full_direction(u: DVector<f64>, mode: SigmaMode) -> Self {
        Self {
            lambda: Lambda::Full,
            sigma: None,
            mode,
            direction: Some(u),
        }
    }

    /// The shift direction `u` such that θ̂ʰ = θ̂ + (θ̂ʳ − πᵀθ̂) u.
    pub fn shift_direction(&self, pi: &DVector<f64>) -> Result<DVector<f64>> {
        let k = pi.len();
        if let Some(u) = &self.direction {
            if u.len() != k {
                return Err(HarmonizeError::InconsistentDimensions(format!(
                    "direction has length {}, expected {k}",
                    u.len()
                )));
            }
            if self.lambda != Lambda::Full {
                return Err(HarmonizeError::InvalidArgument("a direction requires lambda = full".into()));
            }
            let dot = pi.dot(u);
            if (dot - 1.0).abs() > 1e-10 {
                return Err(HarmonizeError::InvalidArgument(format!("direction has πᵀu = {dot}, expected 1")));
            }
            return Ok(u.clone());
        }
        let sigma = self
            .sigma
            .as_ref()
            .ok_or_else(|| HarmonizeError::InvalidArgument("neither Σ nor a direction was given".into()))?;
        check_sigma(sigma, k)?;
        let sp = sigma * pi;
        let c = 1.0 / pi.dot(&sp);
        Ok(sp * self.lambda.scale(c))
    }
}

/// Σ must be K×K, symmetric, with smallest eigenvalue above 1e-10 × largest.
pub fn check_sigma(sigma: &DMatrix<f64>, k: usize) -> Result<()> {
    if sigma.nrows() != k || sigma.ncols() != k {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "Σ is {}x{}, expected {k}x{k}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = sigma.amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(HarmonizeError::SingularSigma("zero or non-finite entries".into()));
    }
    if (sigma - sigma.transpose()).amax() > 1e-10 * scale {
        return Err(HarmonizeError::SingularSigma("not symmetric".into()));
    }
    let eig = sigma.clone().symmetric_eigen().eigenvalues;
    if eig.min() <= 1e-10 * eig.max() {
        return Err(HarmonizeError::SingularSigma(format!(
            "eigenvalue ratio {:.3e}",
            eig.min() / eig.max()
        )));
    }
    Ok(())
}

fn check_pi(pi: &DVector<f64>, k: usize) -> Result<()> {
    if pi.len() != k {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "π has length {}, expected {k}",
            pi.len()
        )));
    }
    Ok(())
}

/// Harmonized vector θ̂ʰ from raw inputs.
pub fn harmonize_vector(
    theta_re: &DVector<f64>,
    theta_r: f64,
    pi: &DVector<f64>,
    cfg: &HarmonizationConfig,
) -> Result<DVector<f64>> {
    check_pi(pi, theta_re.len())?;
    if cfg.lambda == Lambda::Finite(0.0) && cfg.direction.is_none() {
        if let Some(s) = &cfg.sigma {
            check_sigma(s, theta_re.len())?;
        }
        return Ok(theta_re.clone());
    }
    let u = cfg.shift_direction(pi)?;
    Ok(theta_re + u * (theta_r - pi.dot(theta_re)))
}

/// Harmonizes `initial` (subgroup effects) towards `overall` (overall trial
/// effect). The output carries the overall value it was harmonized to.
pub fn harmonize(
    initial: &EffectEstimate,
    overall: &EffectEstimate,
    pi: &DVector<f64>,
    cfg: &HarmonizationConfig,
) -> Result<EffectEstimate> {
    let theta_r = overall.overall_value()?;
    let theta = harmonize_vector(initial.theta()?, theta_r, pi, cfg)?;
    Ok(EffectEstimate {
        theta_k: Some(theta),
        theta_overall: Some(theta_r),
        covariance: None,
        method: EstimatorMethod::Harmonized,
        uses_ec: initial.uses_ec,
    })
}

/// Covariance P S Pᵀ of the harmonized estimator, with P = [I − uπᵀ, u] and
/// S the joint covariance of (θ̂_{1:K}, θ̂ʳ) (overall effect last).
pub fn harmonized_covariance(u: &DVector<f64>, pi: &DVector<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = u.len();
    if s.nrows() != k + 1 || s.ncols() != k + 1 || pi.len() != k {
        return Err(HarmonizeError::InconsistentDimensions("joint covariance must be (K+1)x(K+1)".into()));
    }
    let mut p = DMatrix::zeros(k, k + 1);
    p.view_mut((0, 0), (k, k))
        .copy_from(&(DMatrix::identity(k, k) - u * pi.transpose()));
    p.column_mut(k).copy_from(u);
    let v = &p * s * p.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Sensitivity of the initial estimator's expected value to the EC
/// distortion vector, and its row sums.
#[derive(Debug, Clone)]
pub struct BiasModel {
    pub b_matrix: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl BiasModel {
    pub fn new(b_matrix: DMatrix<f64>) -> Self {
        let b = b_matrix.column_sum();
        Self { b_matrix, b }
    }
}

/// u = b / (πᵀb).
pub fn direction_from_b(b: &DVector<f64>, pi: &DVector<f64>) -> Result<DVector<f64>> {
    check_pi(pi, b.len())?;
    let dot = pi.dot(b);
    if dot.abs() <= 1e-12 * b.amax().max(f64::MIN_POSITIVE) || !dot.is_finite() {
        return Err(HarmonizeError::DegenerateDirection { pi_dot_b: dot });
    }
    Ok(b / dot)
}

/// Bias matrix of the pooled OLS subgroup effects with respect to EC mean
/// shifts, computed from the design alone, and the resulting direction.
pub fn bd_direction_linear(ds: &CombinedDataset, pi: &DVector<f64>) -> Result<(BiasModel, DVector<f64>)> {
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let m2 = build_design(ds, DesignModel::BiasBlock);
    let coef = qr_solve(&m1.values, &m2.values)?;
    let cols = m1.subgroup_treatment_columns();
    let bm = BiasModel::new(coef.select_rows(cols.iter()));
    let u = direction_from_b(&bm.b, pi)?;
    Ok((bm, u))
}

/// A positive-definite Σ with Σπ proportional to b.
///
/// Same-sign b gives diag(|b_k|/π_k). Otherwise, with b' = sign(πᵀb)·b,
/// Σ = b'b'ᵀ/(πᵀb') + ε(I − ππᵀ/πᵀπ) with ε = b'ᵀb'/(πᵀb'), which maps π to b'
/// and is positive definite because πᵀb' > 0.
pub fn solve_sigma_from_b(b: &DVector<f64>, pi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = b.len();
    check_pi(pi, k)?;
    let dot = pi.dot(b);
    if dot.abs() <= 1e-12 * b.amax().max(f64::MIN_POSITIVE) || !dot.is_finite() {
        return Err(HarmonizeError::DegenerateDirection { pi_dot_b: dot });
    }
    let same_sign = b.iter().all(|&v| v > 0.0) || b.iter().all(|&v| v < 0.0);
    let sigma = if same_sign {
        DMatrix::from_fn(k, k, |i, j| if i == j { b[i].abs() / pi[i] } else { 0.0 })
    } else {
        let bp = b * dot.signum();
        let pb = pi.dot(&bp);
        let eps = bp.dot(&bp) / pb;
        let proj = DMatrix::identity(k, k) - pi * pi.transpose() / pi.dot(pi);
        let s = &bp * bp.transpose() / pb + proj * eps;
        (&s + s.transpose()) * 0.5
    };
    check_sigma(&sigma, k)?;
    Ok(sigma)
}

/// Σ from the initial estimate's covariance, with eigenvalues floored at
/// 2e-10 × the largest eigenvalue so the result passes [`check_sigma`].
pub fn vd_sigma(initial: &EffectEstimate) -> Result<DMatrix<f64>> {
    let cov = initial.covariance.as_ref().ok_or(HarmonizeError::MissingCovariance)?;
    let eig = cov.clone().symmetric_eigen();
    let floor = 2e-10 * eig.eigenvalues.max();
    if eig.eigenvalues.min() >= floor && (cov - cov.transpose()).amax() == 0.0 {
        return Ok(cov.clone());
    }
    if !(floor > 0.0) {
        return Err(HarmonizeError::SingularSigma("covariance has non-positive trace".into()));
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

struct Arms {
    n1: f64,
    n0: f64,
}

fn design_arms(dc: &DesignCounts) -> Result<Arms> {
    let n1 = dc.n_arm(1, Study::Rct) as f64;
    let n0 = dc.n_arm(0, Study::Rct) as f64;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(HarmonizeError::InvalidDesign("an RCT arm is empty".into()));
    }
    if dc.pi.iter().any(|&p| !(p > 0.0)) {
        return Err(HarmonizeError::InvalidDesign("prevalences must be positive".into()));
    }
    Ok(Arms { n1, n0 })
}

/// Bias and covariance of the harmonized difference-of-means estimator under
/// the cell-means model with EC mean shifts γ, assuming a common
/// randomization ratio across subgroups and RCT subgroup shares equal to π.
pub fn analytic_bias_variance(
    dc: &DesignCounts,
    gamma: &DVector<f64>,
    sigma: &DMatrix<f64>,
    lambda: Lambda,
    phi2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = dc.k();
    let Arms { n1, n0 } = design_arms(dc)?;
    check_pi(gamma, k)?;
    check_sigma(sigma, k)?;
    let pi = &dc.pi;
    let sp = sigma * pi;
    let s = lambda.scale(1.0 / pi.dot(&sp));
    let qg = dc.q_diag.component_mul(gamma);
    let bias = -(&qg - &sp * (s * pi.dot(&qg)));
    let mut v = &sp * sp.transpose() * (s * s * dc.q_bar * phi2 / n0);
    for j in 0..k {
        v[(j, j)] += phi2 * (1.0 / n1 + (1.0 - dc.q_diag[j]) / n0) / pi[j];
    }
    Ok((bias, v))
}

/// MSE(pooled) − MSE(bias-directed fully harmonized) per subgroup, for the
/// difference-of-means estimators under the cell-means model.
pub fn mse_difference(dc: &DesignCounts, gamma: &DVector<f64>, phi2: f64) -> Result<DVector<f64>> {
    let k = dc.k();
    let Arms { n0, .. } = design_arms(dc)?;
    check_pi(gamma, k)?;
    let q = &dc.q_diag;
    let q_bar = dc.q_bar;
    if !(q_bar > 0.0) {
        return Err(HarmonizeError::InvalidDesign("no external controls".into()));
    }
    let gamma_bar = dc.pi.iter().zip(q.iter()).zip(gamma.iter()).map(|((p, q), g)| p * q * g).sum::<f64>() / q_bar;
    Ok(DVector::from_fn(k, |j, _| {
        let q2 = q[j] * q[j];
        q2 * (gamma[j] * gamma[j] - (gamma[j] - gamma_bar).powi(2)) - q2 * phi2 / (n0 * q_bar)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_design_counts, CombinedDataset, OutcomeFamily, PrevalenceSource, SubjectRecord};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn two_group_examples() {
        let pi = v(&[0.5, 0.5]);
        let theta = v(&[1.0, 0.0]);
        let full = harmonize_vector(&theta, 1.0, &pi, &HarmonizationConfig::new(Lambda::Full, DMatrix::identity(2, 2))).unwrap();
        assert!((full - v(&[1.5, 0.5])).amax() < 1e-14);
        let one = harmonize_vector(&theta, 1.0, &pi, &HarmonizationConfig::new(Lambda::Finite(1.0), DMatrix::identity(2, 2)))
            .unwrap();
        assert!((one - v(&[7.0 / 6.0, 1.0 / 6.0])).amax() < 1e-14);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let theta = v(&[0.1, -3.7, 2.2]);
        let pi = v(&[0.2, 0.3, 0.5]);
        let cfg = HarmonizationConfig::new(Lambda::Finite(0.0), DMatrix::identity(3, 3));
        assert_eq!(harmonize_vector(&theta, 9.0, &pi, &cfg).unwrap(), theta);
    }

    #[test]
    fn lambda_parsing() {
        assert_eq!(Lambda::parse("full").unwrap(), Lambda::Full);
        assert_eq!(Lambda::parse("2.5").unwrap(), Lambda::Finite(2.5));
        assert!(Lambda::parse("-1").is_err());
        let l: Lambda = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(l, Lambda::Full);
        let l: Lambda = serde_json::from_str("10").unwrap();
        assert_eq!(l, Lambda::Finite(10.0));
    }

    #[test]
    fn singular_sigma_rejected() {
        let cfg = HarmonizationConfig::new(Lambda::Full, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        let err = harmonize_vector(&v(&[0.0, 0.0]), 1.0, &v(&[0.5, 0.5]), &cfg).unwrap_err();
        assert!(matches!(err, HarmonizeError::SingularSigma(_)));
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let cfg = HarmonizationConfig::new(Lambda::Full, DMatrix::identity(2, 2));
        let err = harmonize_vector(&v(&[0.0, 0.0, 0.0]), 1.0, &v(&[0.5, 0.5]), &cfg).unwrap_err();
        assert!(matches!(err, HarmonizeError::InconsistentDimensions(_)));
    }

    #[test]
    fn sigma_from_same_sign_b() {
        let s = solve_sigma_from_b(&v(&[2.0, 1.0]), &v(&[0.5, 0.5])).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&v(&[4.0, 2.0])));
        let s = solve_sigma_from_b(&v(&[0.25; 4]), &v(&[0.25; 4])).unwrap();
        assert_eq!(s, DMatrix::identity(4, 4));
    }

    #[test]
    fn degenerate_b_rejected() {
        let err = solve_sigma_from_b(&v(&[1.0, -1.0]), &v(&[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, HarmonizeError::DegenerateDirection { .. }));
        assert!(direction_from_b(&v(&[1.0, -1.0]), &v(&[0.5, 0.5])).is_err());
        let u = direction_from_b(&v(&[1.0, 1.0, 1.0]), &v(&[0.2, 0.3, 0.5])).unwrap();
        assert!((u - v(&[1.0, 1.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn vd_sigma_passes_and_floors() {
        let diag = DMatrix::from_diagonal(&v(&[0.3, 0.7]));
        let est = EffectEstimate::external(v(&[0.0, 0.0]), Some(diag.clone()), true).unwrap();
        assert_eq!(vd_sigma(&est).unwrap(), diag);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let est = EffectEstimate::external(v(&[0.0, 0.0]), Some(singular), true).unwrap();
        let s = vd_sigma(&est).unwrap();
        check_sigma(&s, 2).unwrap();
        let none = EffectEstimate::subgroups(v(&[0.0]), EstimatorMethod::DiffMeans, true);
        assert!(matches!(vd_sigma(&none), Err(HarmonizeError::MissingCovariance)));
    }

    /// Balanced cell-means design: `n_r` RCT patients split evenly over
    /// subgroups and arms, `n_e` EC patients split evenly over subgroups.
    fn balanced(k: usize, n_r: usize, n_e: usize) -> CombinedDataset {
        let mut rct = Vec::new();
        let mut ec = Vec::new();
        for j in 0..k {
            for t in 0..2u8 {
                for _ in 0..n_r / (2 * k) {
                    rct.push(SubjectRecord::new(Study::Rct, j, t, 0.0, vec![]));
                }
            }
            for _ in 0..n_e / k {
                ec.push(SubjectRecord::new(Study::Ec, j, 0, 0.0, vec![]));
            }
        }
        let labels = (0..k).map(|i| format!("{i}")).collect();
        CombinedDataset::new(rct, ec, labels, 0, OutcomeFamily::Continuous).unwrap()
    }

    #[test]
    fn fig1_design_bias_and_variance() {
        let ds = balanced(10, 100, 500);
        let dc = compute_design_counts(&ds, &PrevalenceSource::RctEmpirical).unwrap();
        let (bm, u) = bd_direction_linear(&ds, &dc.pi).unwrap();
        assert!((bm.b_matrix.clone() + DMatrix::from_diagonal(&dc.q_diag)).amax() < 1e-10);
        assert!((u.clone() - DVector::from_element(10, 1.0)).amax() < 1e-10);
        let sigma = solve_sigma_from_b(&bm.b, &dc.pi).unwrap();
        let ones = DVector::from_element(10, 1.0);
        let (bias, var) = analytic_bias_variance(&dc, &ones, &sigma, Lambda::Full, 1.0).unwrap();
        assert!(bias.amax() < 1e-12);
        let expected = 10.0 / 50.0 * (2.0 - 10.0 / 11.0) + (10.0 / 11.0) / 50.0;
        assert!((var[(0, 0)] - expected).abs() < 1e-12);
        assert!((expected - 0.2364).abs() < 1e-4);
        let (bias0, _) = analytic_bias_variance(&dc, &ones, &sigma, Lambda::Finite(0.0), 1.0).unwrap();
        assert!((bias0[0] + 10.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn mse_difference_reference_values() {
        let ds = balanced(10, 100, 500);
        let dc = compute_design_counts(&ds, &PrevalenceSource::RctEmpirical).unwrap();
        let q = 10.0 / 11.0;
        let zero = mse_difference(&dc, &DVector::zeros(10), 1.0).unwrap();
        assert!((zero[0] + q / 50.0).abs() < 1e-12);
        assert!((zero[0] + 0.0182).abs() < 1e-4);
        let sdm = mse_difference(&dc, &DVector::from_element(10, 1.0), 1.0).unwrap();
        assert!((sdm[0] - (q * q - q / 50.0)).abs() < 1e-12);
        assert!(sdm[0] > 0.0);
        let alt = DVector::from_fn(10, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });
        let d = mse_difference(&dc, &alt, 1.0).unwrap();
        assert!((d[0] - (-q / 50.0)).abs() < 1e-12);
    }

    #[test]
    fn bd_degenerate_design() {
        // Two subgroups with opposite EC sensitivities and equal prevalence.
        let pi = v(&[0.5, 0.5]);
        let b = v(&[-0.4, 0.4]);
        assert!(matches!(
            solve_sigma_from_b(&b, &pi),
            Err(HarmonizeError::DegenerateDirection { .. })
        ));
    }

    fn random_pd(k: usize, u: &mut impl FnMut() -> f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| u());
        &a * a.transpose() + DMatrix::identity(k, k) * 0.1
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed ^ 0x9E3779B97F4A7C15;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_pi(k: usize, u: &mut impl FnMut() -> f64) -> DVector<f64> {
        let raw = DVector::from_fn(k, |_, _| u().abs() + 0.05);
        let s = raw.sum();
        raw / s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn full_constraint_holds(seed in any::<u64>(), k in 1usize..9) {
            let mut u = lcg(seed);
            let sigma = random_pd(k, &mut u);
            let pi = random_pi(k, &mut u);
            let theta = DVector::from_fn(k, |_, _| 3.0 * u());
            let tr = 2.0 * u();
            let h = harmonize_vector(&theta, tr, &pi, &HarmonizationConfig::new(Lambda::Full, sigma)).unwrap();
            prop_assert!((pi.dot(&h) - tr).abs() < 1e-10);
        }

        #[test]
        fn shrinkage_and_shift_forms_agree(seed in any::<u64>(), k in 1usize..9, li in 0usize..4) {
            let lambda = [0.1, 1.0, 10.0, 1e6][li];
            let mut u = lcg(seed);
            let sigma = random_pd(k, &mut u);
            let pi = random_pi(k, &mut u);
            let theta = DVector::from_fn(k, |_, _| 3.0 * u());
            let tr = 2.0 * u();
            let h = harmonize_vector(&theta, tr, &pi, &HarmonizationConfig::new(Lambda::Finite(lambda), sigma.clone())).unwrap();
            // (Σ⁻¹ + λππᵀ)⁻¹ (Σ⁻¹θ + λθʳπ)
            let si = sigma.clone().try_inverse().unwrap();
            let a = &si + &pi * pi.transpose() * lambda;
            let rhs = &si * &theta + &pi * (lambda * tr);
            let direct = a.lu().solve(&rhs).unwrap();
            prop_assert!((h - direct).amax() < 1e-8 * theta.amax().max(1.0));
        }

        #[test]
        fn affine_superposition(seed in any::<u64>(), k in 1usize..7) {
            let mut u = lcg(seed);
            let cfg = HarmonizationConfig::new(Lambda::Finite(2.0), random_pd(k, &mut u));
            let pi = random_pi(k, &mut u);
            let (t1, t2) = (DVector::from_fn(k, |_, _| u()), DVector::from_fn(k, |_, _| u()));
            let (r1, r2) = (u(), u());
            let a = 0.3;
            let mix = harmonize_vector(&(&t1 * a + &t2 * (1.0 - a)), a * r1 + (1.0 - a) * r2, &pi, &cfg).unwrap();
            let sep = harmonize_vector(&t1, r1, &pi, &cfg).unwrap() * a + harmonize_vector(&t2, r2, &pi, &cfg).unwrap() * (1.0 - a);
            prop_assert!((mix - sep).amax() < 1e-12);
        }

        #[test]
        fn sigma_from_b_properties(seed in any::<u64>(), k in 2usize..8) {
            let mut u = lcg(seed);
            let pi = random_pi(k, &mut u);
            let b = DVector::from_fn(k, |_, _| u());
            prop_assume!(pi.dot(&b).abs() > 0.05);
            let sigma = solve_sigma_from_b(&b, &pi).unwrap();
            let eig = sigma.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() > 0.0);
            let sp = &sigma * &pi;
            let kappa = sp.dot(&b) / b.dot(&b);
            prop_assert!((sp - &b * kappa).amax() < 1e-10 * b.amax());
            // Any two admissible Σ give the same full harmonization.
            let alt = DMatrix::from_diagonal(&DVector::from_fn(k, |i, _| b[i].abs() / pi[i]));
            let theta = DVector::from_fn(k, |_, _| u());
            let h1 = harmonize_vector(&theta, 0.4, &pi, &HarmonizationConfig::new(Lambda::Full, sigma)).unwrap();
            let h2 = harmonize_vector(&theta, 0.4, &pi, &HarmonizationConfig::full_direction(direction_from_b(&b, &pi).unwrap(), SigmaMode::Bd)).unwrap();
            prop_assert!((&h1 - &h2).amax() < 1e-10);
            if b.iter().all(|&x| x > 0.0) {
                let h3 = harmonize_vector(&theta, 0.4, &pi, &HarmonizationConfig::new(Lambda::Full, alt)).unwrap();
                prop_assert!((h1 - h3).amax() < 1e-10);
            }
        }
    }
}
