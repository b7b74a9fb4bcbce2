//! Conjugate normal linear models for the overall (trial-only) and subgroup
//! (trial + EC) analyses, and the cut / plug-in combinations of the two.

use nalgebra::{DMatrix, DVector};

use crate::data::CombinedDataset;
use crate::error::{HarmonizeError, Result};
use crate::glm::{build_design, ColumnRole, DesignMatrix, DesignModel};

/// Prior variance used for "flat" priors.
pub const FLAT_PRIOR_VARIANCE: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct NormalPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub roles: Vec<ColumnRole>,
}

impl NormalPosterior {
    /// Independent N(0, variance) on every parameter.
    pub fn flat(roles: Vec<ColumnRole>, variance: f64) -> Self {
        let p = roles.len();
        Self {
            mean: DVector::zeros(p),
            covariance: DMatrix::identity(p, p) * variance,
            roles,
        }
    }

    fn index_of(&self, role: ColumnRole) -> Result<usize> {
        self.roles
            .iter()
            .position(|&r| r == role)
            .ok_or_else(|| HarmonizeError::InconsistentDimensions(format!("posterior has no {role:?} parameter")))
    }

    /// Mean and covariance of the subgroup treatment effects.
    pub fn subgroup_effects(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut idx: Vec<(usize, usize)> = self
            .roles
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                ColumnRole::SubgroupTreatment(k) => Some((*k, i)),
                _ => None,
            })
            .collect();
        if idx.is_empty() {
            return Err(HarmonizeError::InconsistentDimensions("posterior has no subgroup effects".into()));
        }
        idx.sort();
        let cols: Vec<usize> = idx.into_iter().map(|(_, i)| i).collect();
        let mean = DVector::from_iterator(cols.len(), cols.iter().map(|&i| self.mean[i]));
        let cov = self.covariance.select_rows(cols.iter()).select_columns(cols.iter());
        Ok((mean, cov))
    }

    /// Mean and variance of the overall treatment effect.
    pub fn overall_effect(&self) -> Result<(f64, f64)> {
        let i = self.index_of(ColumnRole::Treatment)?;
        Ok((self.mean[i], self.covariance[(i, i)]))
    }
}

/// Posterior of β in y ~ N(Xβ, σ²I), β ~ N(m, τ). Uses
/// Σ = τ(I + Aτ)⁻¹ with A = XᵀX/σ², which stays valid for singular τ.
pub fn conjugate_linear_update(
    design: &DesignMatrix,
    y: &[f64],
    prior: &NormalPosterior,
    noise_var: f64,
) -> Result<NormalPosterior> {
    let p = design.ncols();
    if !(noise_var > 0.0) {
        return Err(HarmonizeError::InvalidArgument("noise variance must be positive".into()));
    }
    if prior.mean.len() != p || prior.covariance.nrows() != p || prior.covariance.ncols() != p {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "prior has dimension {}, design has {p} columns",
            prior.mean.len()
        )));
    }
    if y.len() != design.nrows() {
        return Err(HarmonizeError::DimensionMismatch(format!(
            "{} outcomes for {} design rows",
            y.len(),
            design.nrows()
        )));
    }
    let tau = &prior.covariance;
    let scale = tau.amax().max(f64::MIN_POSITIVE);
    if (tau - tau.transpose()).amax() > 1e-10 * scale || tau.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * scale
    {
        return Err(HarmonizeError::SingularPrior);
    }
    let x = &design.values;
    let a = x.tr_mul(x) / noise_var;
    let xty = x.tr_mul(&DVector::from_column_slice(y)) / noise_var;
    let eye = DMatrix::<f64>::identity(p, p);
    // (I + τA)⁻¹ and its transpose (I + Aτ)⁻¹.
    let lu = (&eye + tau * &a).lu();
    let mean = lu
        .solve(&(&prior.mean + tau * xty))
        .ok_or_else(|| HarmonizeError::SingularPosterior("I + τA is singular".into()))?;
    let inv = lu
        .try_inverse()
        .ok_or_else(|| HarmonizeError::SingularPosterior("I + τA is singular".into()))?;
    let cov = &inv * tau;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(NormalPosterior {
        mean,
        covariance: cov,
        roles: design.roles.clone(),
    })
}

/// Overall analysis of the trial: y ~ N(μ + θT (+ βᵀX), σ²).
pub fn analyst1_posterior(ds: &CombinedDataset, prior: &NormalPosterior, sigma2: f64) -> Result<NormalPosterior> {
    let m0 = build_design(ds, DesignModel::OverallRct);
    let y: Vec<f64> = ds.rct().iter().map(|r| r.outcome).collect();
    conjugate_linear_update(&m0, &y, prior, sigma2)
}

/// Subgroup analysis of trial and EC data with shared subgroup control
/// means: y ~ N(μ_W + θ_W T (+ βᵀX), φ²).
pub fn analyst2_posterior(ds: &CombinedDataset, prior: &NormalPosterior, phi2: f64) -> Result<NormalPosterior> {
    let m1 = build_design(ds, DesignModel::PooledSubgroup);
    let y: Vec<f64> = ds.rows().map(|r| r.outcome).collect();
    conjugate_linear_update(&m1, &y, prior, phi2)
}

fn subgroup_roles(k: usize) -> Vec<ColumnRole> {
    (0..k).map(ColumnRole::SubgroupTreatment).collect()
}

/// Subgroup effects under the subgroup posterior conditional on πᵀθ, with
/// the overall effect drawn from the trial-only posterior.
pub fn cut_distribution(p1: &NormalPosterior, p2: &NormalPosterior, pi: &DVector<f64>) -> Result<NormalPosterior> {
    let (m2, s2) = p2.subgroup_effects()?;
    let (m1, v1) = p1.overall_effect()?;
    if pi.len() != m2.len() {
        return Err(HarmonizeError::InconsistentDimensions("π does not match the subgroup count".into()));
    }
    let sp = &s2 * pi;
    let v2 = pi.dot(&sp);
    if !(v2 > 0.0) {
        return Err(HarmonizeError::SingularPosterior("πᵀΣπ is not positive".into()));
    }
    let mean = &m2 + &sp * ((m1 - pi.dot(&m2)) / v2);
    let cov = &s2 + &sp * sp.transpose() * ((v1 - v2) / (v2 * v2));
    Ok(NormalPosterior {
        mean,
        covariance: (&cov + cov.transpose()) * 0.5,
        roles: subgroup_roles(pi.len()),
    })
}

/// Subgroup posterior conditioned on πᵀθ equal to a fixed overall value.
pub fn plug_in_distribution(p2: &NormalPosterior, pi: &DVector<f64>, theta_a1: f64) -> Result<NormalPosterior> {
    let (m2, s2) = p2.subgroup_effects()?;
    if pi.len() != m2.len() {
        return Err(HarmonizeError::InconsistentDimensions("π does not match the subgroup count".into()));
    }
    let sp = &s2 * pi;
    let v2 = pi.dot(&sp);
    if !(v2 > 0.0) {
        return Err(HarmonizeError::SingularPosterior("πᵀΣπ is not positive".into()));
    }
    let mean = &m2 + &sp * ((theta_a1 - pi.dot(&m2)) / v2);
    let cov = &s2 - &sp * sp.transpose() / v2;
    Ok(NormalPosterior {
        mean,
        covariance: (&cov + cov.transpose()) * 0.5,
        roles: subgroup_roles(pi.len()),
    })
}
