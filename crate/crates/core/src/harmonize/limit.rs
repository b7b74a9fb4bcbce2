//! Large-sample limit of the (weighted) pooled logistic estimator as a
//! function of the EC logit shift δ, and its finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::data::{CombinedDataset, SubjectRecord};
use crate::error::{HarmonizeError, Result};
use crate::estimators::marginal_effects;
use crate::glm::{
    build_design, fit_logistic_fractional, fit_logistic_irls, logistic, pooled_subgroup_row, DesignModel, IrlsOptions,
};

use super::{direction_from_b, BiasModel};

/// Everything needed to evaluate the limit map: the anchor coefficients
/// (ν, η, β) of the true model, the empirical (W, X) of both studies, the EC
/// weights and the empirical treatment probability.
#[derive(Debug, Clone)]
pub struct LimitMapSpec {
    k: usize,
    d: usize,
    anchor: DVector<f64>,
    rct: Vec<SubjectRecord>,
    ec_linear: Vec<(usize, f64)>,
    design: DMatrix<f64>,
    weights: Vec<f64>,
    base_y: Vec<f64>,
}

impl LimitMapSpec {
    /// Builds the map around given anchor coefficients. `ec_weights` defaults
    /// to the EC records' own weights.
    pub fn new(ds: &CombinedDataset, anchor: DVector<f64>, ec_weights: Option<&[f64]>) -> Result<Self> {
        let k = ds.k();
        let d = ds.d();
        let p = 2 * k + d;
        if anchor.len() != p {
            return Err(HarmonizeError::InconsistentDimensions(format!(
                "anchor has {} coefficients, expected {p}",
                anchor.len()
            )));
        }
        let n_r = ds.rct().len();
        if n_r == 0 {
            return Err(HarmonizeError::EmptyArm { arm: "RCT" });
        }
        let w_ec: Vec<f64> = match ec_weights {
            Some(w) if w.len() == ds.ec().len() => w.to_vec(),
            Some(w) => {
                return Err(HarmonizeError::DimensionMismatch(format!(
                    "{} EC weights for {} EC rows",
                    w.len(),
                    ds.ec().len()
                )))
            }
            None => ds.ec().iter().map(|r| r.weight).collect(),
        };
        let p_treat = ds.rct().iter().filter(|r| r.treatment == 1).count() as f64 / n_r as f64;

        let rows = 2 * n_r + ds.ec().len();
        let mut design = DMatrix::zeros(rows, p);
        let mut weights = Vec::with_capacity(rows);
        let mut base_y = Vec::with_capacity(rows);
        let mut buf = vec![0.0; p];
        let mut i = 0;
        for r in ds.rct() {
            for t in [0u8, 1] {
                let pseudo = SubjectRecord { treatment: t, ..r.clone() };
                pooled_subgroup_row(&pseudo, k, &mut buf);
                let eta: f64 = buf.iter().zip(anchor.iter()).map(|(x, b)| x * b).sum();
                design.row_mut(i).copy_from_slice(&buf);
                weights.push(if t == 1 { p_treat } else { 1.0 - p_treat });
                base_y.push(logistic(eta));
                i += 1;
            }
        }
        let mut ec_linear = Vec::with_capacity(ds.ec().len());
        for (r, &w) in ds.ec().iter().zip(&w_ec) {
            pooled_subgroup_row(r, k, &mut buf);
            let eta: f64 = buf.iter().zip(anchor.iter()).map(|(x, b)| x * b).sum();
            design.row_mut(i).copy_from_slice(&buf);
            weights.push(w);
            base_y.push(logistic(eta));
            ec_linear.push((r.subgroup, eta));
            i += 1;
        }
        Ok(Self {
            k,
            d,
            anchor,
            rct: ds.rct().to_vec(),
            ec_linear,
            design,
            weights,
            base_y,
        })
    }

    /// Anchors the map at the RCT-only logistic fit.
    pub fn from_rct_fit(ds: &CombinedDataset, ec_weights: Option<&[f64]>) -> Result<Self> {
        let rct = ds.rct_only();
        let m1 = build_design(&rct, DesignModel::PooledSubgroup);
        let y: Vec<f64> = rct.rct().iter().map(|r| r.outcome).collect();
        let fit = fit_logistic_irls(&m1, &y, &vec![1.0; y.len()], &IrlsOptions::default())?;
        Self::new(ds, fit.coefficients, ec_weights)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    /// Marginal subgroup effects implied by the anchor coefficients.
    pub fn anchor_theta(&self) -> Result<DVector<f64>> {
        Ok(marginal_effects(&self.anchor, &self.rct, self.k)?.0)
    }
}

/// θ°(δ): marginal effects at the maximizer of the expected weighted
/// log-likelihood when EC outcomes follow the anchor model shifted by δ on
/// the logit scale.
pub fn limit_map_theta(spec: &LimitMapSpec, delta: &DVector<f64>) -> Result<DVector<f64>> {
    if delta.len() != spec.k {
        return Err(HarmonizeError::InconsistentDimensions(format!(
            "δ has length {}, expected {}",
            delta.len(),
            spec.k
        )));
    }
    let mut y = spec.base_y.clone();
    let offset = 2 * spec.rct.len();
    for (i, &(g, eta)) in spec.ec_linear.iter().enumerate() {
        y[offset + i] = logistic(eta + delta[g]);
    }
    let fit = fit_logistic_fractional(&spec.design, &y, &spec.weights, &IrlsOptions::default(), Some(&spec.anchor))?;
    Ok(marginal_effects(&fit.coefficients, &spec.rct, spec.k)?.0)
}

/// Jacobian of the limit map at δ = 0 by central differences with step `h`,
/// and the bias-directed shift direction b̂/(πᵀb̂).
pub fn bd_direction_glm(spec: &LimitMapSpec, h: f64, pi: &DVector<f64>) -> Result<(BiasModel, DVector<f64>)> {
    if !(h > 0.0) {
        return Err(HarmonizeError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let k = spec.k;
    let mut b = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut e = DVector::zeros(k);
        e[j] = h;
        let plus = limit_map_theta(spec, &e)?;
        let minus = limit_map_theta(spec, &(-e))?;
        b.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    let bm = BiasModel::new(b);
    let u = direction_from_b(&bm.b, pi)?;
    Ok((bm, u))
}
