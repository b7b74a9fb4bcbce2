//! Patient records, combined trial + external-control datasets, CSV ingestion
//! and per-subgroup design bookkeeping.
//!
//! Subgroups are stored as zero-based indices `0..k`. String labels found in
//! CSV files are mapped to indices by lexicographic order of the label set;
//! the mapping is kept on the dataset (`labels()[i]` is the label of index
//! `i`) so reports can print the original names.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Rct,
    Ec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub outcome: f64,
    /// 0 control, 1 experimental.
    pub treatment: u8,
    /// Zero-based subgroup index.
    pub subgroup: usize,
    pub covariates: Vec<f64>,
    pub study: Study,
    pub weight: f64,
}

impl SubjectRecord {
    pub fn new(study: Study, subgroup: usize, treatment: u8, outcome: f64, covariates: Vec<f64>) -> Self {
        Self {
            outcome,
            treatment,
            subgroup,
            covariates,
            study,
            weight: 1.0,
        }
    }

    pub fn is_treated(&self) -> bool {
        self.treatment == 1
    }
}

/// Validated RCT + EC collections.
#[derive(Debug, Clone)]
pub struct CombinedDataset {
    rct: Vec<SubjectRecord>,
    ec: Vec<SubjectRecord>,
    labels: Vec<String>,
    d: usize,
    family: OutcomeFamily,
}

impl CombinedDataset {
    /// Builds a dataset, checking every record invariant.
    pub fn new(
        rct: Vec<SubjectRecord>,
        ec: Vec<SubjectRecord>,
        labels: Vec<String>,
        d: usize,
        family: OutcomeFamily,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(HarmonizeError::InvalidArgument("at least one subgroup is required".into()));
        }
        let k = labels.len();
        for (study, rows) in [(Study::Rct, &rct), (Study::Ec, &ec)] {
            let file = match study {
                Study::Rct => "rct",
                Study::Ec => "ec",
            };
            for (i, r) in rows.iter().enumerate() {
                if r.study != study {
                    return Err(HarmonizeError::InvalidArgument(format!(
                        "record {i} in the {file} collection is tagged {:?}",
                        r.study
                    )));
                }
                if r.subgroup >= k {
                    return Err(HarmonizeError::UnknownSubgroup {
                        file: file.into(),
                        row: i,
                        label: r.subgroup.to_string(),
                    });
                }
                if r.covariates.len() != d {
                    return Err(HarmonizeError::DimensionMismatch(format!(
                        "{file} record {i} has {} covariates, expected {d}",
                        r.covariates.len()
                    )));
                }
                if r.treatment > 1 {
                    return Err(HarmonizeError::MalformedRow {
                        file: file.into(),
                        row: i,
                        reason: format!("treatment {} is not 0/1", r.treatment),
                    });
                }
                if study == Study::Ec && r.treatment == 1 {
                    return Err(HarmonizeError::EcTreatedPatient { file: file.into(), row: i });
                }
                if !(r.weight >= 0.0) || !r.weight.is_finite() {
                    return Err(HarmonizeError::MalformedRow {
                        file: file.into(),
                        row: i,
                        reason: format!("weight {} is not a finite non-negative number", r.weight),
                    });
                }
                if !r.outcome.is_finite() || r.covariates.iter().any(|x| !x.is_finite()) {
                    return Err(HarmonizeError::MalformedRow {
                        file: file.into(),
                        row: i,
                        reason: "non-finite value".into(),
                    });
                }
                if family == OutcomeFamily::Binary && r.outcome != 0.0 && r.outcome != 1.0 {
                    return Err(HarmonizeError::MalformedRow {
                        file: file.into(),
                        row: i,
                        reason: format!("binary outcome {} is not 0/1", r.outcome),
                    });
                }
            }
        }
        Ok(Self {
            rct,
            ec,
            labels,
            d,
            family,
        })
    }

    pub fn rct(&self) -> &[SubjectRecord] {
        &self.rct
    }

    pub fn ec(&self) -> &[SubjectRecord] {
        &self.ec
    }

    /// RCT rows followed by EC rows.
    pub fn rows(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.rct.iter().chain(self.ec.iter())
    }

    pub fn n_rows(&self) -> usize {
        self.rct.len() + self.ec.len()
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn family(&self) -> OutcomeFamily {
        self.family
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Same RCT data with the external controls removed.
    pub fn rct_only(&self) -> Self {
        Self {
            rct: self.rct.clone(),
            ec: Vec::new(),
            labels: self.labels.clone(),
            d: self.d,
            family: self.family,
        }
    }

    /// Same RCT data with a different external-control collection.
    pub fn with_ec(&self, ec: Vec<SubjectRecord>) -> Result<Self> {
        Self::new(self.rct.clone(), ec, self.labels.clone(), self.d, self.family)
    }

    /// Replaces the analysis weights of the EC rows.
    pub fn with_ec_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.ec.len() {
            return Err(HarmonizeError::DimensionMismatch(format!(
                "{} weights for {} EC rows",
                weights.len(),
                self.ec.len()
            )));
        }
        let ec = self
            .ec
            .iter()
            .zip(weights)
            .map(|(r, &w)| SubjectRecord { weight: w, ..r.clone() })
            .collect();
        Self::new(self.rct.clone(), ec, self.labels.clone(), self.d, self.family)
    }

    /// Overwrites every outcome in place (RCT rows first, then EC rows),
    /// keeping the design. Binary datasets only accept 0/1.
    pub fn replace_outcomes(&mut self, mut f: impl FnMut(&SubjectRecord) -> f64) -> Result<()> {
        let family = self.family;
        for (file, rows) in [("rct", &mut self.rct), ("ec", &mut self.ec)] {
            for (i, r) in rows.iter_mut().enumerate() {
                let y = f(r);
                let ok = match family {
                    OutcomeFamily::Continuous => y.is_finite(),
                    OutcomeFamily::Binary => y == 0.0 || y == 1.0,
                };
                if !ok {
                    return Err(HarmonizeError::MalformedRow {
                        file: file.into(),
                        row: i,
                        reason: format!("generated outcome {y} is invalid"),
                    });
                }
                r.outcome = y;
            }
        }
        Ok(())
    }

    /// Outcomes of RCT patients in subgroup `k` and arm `t`.
    pub fn rct_outcomes(&self, k: usize, t: u8) -> impl Iterator<Item = f64> + '_ {
        self.rct
            .iter()
            .filter(move |r| r.subgroup == k && r.treatment == t)
            .map(|r| r.outcome)
    }

    /// Outcomes of EC patients in subgroup `k`.
    pub fn ec_outcomes(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.ec.iter().filter(move |r| r.subgroup == k).map(|r| r.outcome)
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub outcome: String,
    /// Required for trial files; pool files without a treatment column are
    /// read as all-control.
    #[serde(default)]
    pub treatment: Option<String>,
    pub subgroup: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub weight: Option<String>,
    /// Restricts the admissible labels. Indices always follow lexicographic
    /// label order.
    #[serde(default)]
    pub subgroup_labels: Option<Vec<String>>,
    pub family: OutcomeFamily,
}

impl Schema {
    pub fn new(outcome: &str, treatment: &str, subgroup: &str, covariates: &[&str], family: OutcomeFamily) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: Some(treatment.into()),
            subgroup: subgroup.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            weight: None,
            subgroup_labels: None,
            family,
        }
    }
}

struct RawRow {
    outcome: f64,
    treatment: u8,
    label: String,
    covariates: Vec<f64>,
    weight: f64,
}

fn column_index(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| HarmonizeError::MalformedRow {
            file: file.into(),
            row: 0,
            reason: format!("missing column {name:?}"),
        })
}

fn parse_cell(rec: &csv::StringRecord, idx: usize, file: &str, row: usize, what: &str) -> Result<f64> {
    let cell = rec.get(idx).map(str::trim).unwrap_or("");
    if cell.is_empty() {
        return Err(HarmonizeError::MalformedRow {
            file: file.into(),
            row,
            reason: format!("empty {what} cell"),
        });
    }
    let v: f64 = cell.parse().map_err(|_| HarmonizeError::MalformedRow {
        file: file.into(),
        row,
        reason: format!("cannot parse {what} value {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(HarmonizeError::MalformedRow {
            file: file.into(),
            row,
            reason: format!("non-finite {what} value {cell:?}"),
        });
    }
    Ok(v)
}

fn read_raw(path: &Path, schema: &Schema, require_treatment: bool) -> Result<Vec<RawRow>> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => HarmonizeError::Io { path: file.clone(), source },
            other => HarmonizeError::MalformedRow {
                file: file.clone(),
                row: 0,
                reason: format!("{other:?}"),
            },
        })?;
    let headers = reader.headers()?.clone();
    let outcome_idx = column_index(&headers, &schema.outcome, &file)?;
    let subgroup_idx = column_index(&headers, &schema.subgroup, &file)?;
    // external-control files may omit the treatment column
    let treatment_idx = match &schema.treatment {
        Some(name) if require_treatment => Some(column_index(&headers, name, &file)?),
        Some(name) => column_index(&headers, name, &file).ok(),
        None if require_treatment => {
            return Err(HarmonizeError::InvalidArgument(
                "schema has no treatment column but trial data require one".into(),
            ))
        }
        None => None,
    };
    let cov_idx = schema
        .covariates
        .iter()
        .map(|c| column_index(&headers, c, &file))
        .collect::<Result<Vec<_>>>()?;
    let weight_idx = schema
        .weight
        .as_ref()
        .map(|w| column_index(&headers, w, &file))
        .transpose()?;

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // header is line 1, first data row is line 2
        let row = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(HarmonizeError::DimensionMismatch(format!(
                "{file} line {row} has {} fields, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        let outcome = parse_cell(&rec, outcome_idx, &file, row, "outcome")?;
        let treatment = match treatment_idx {
            Some(idx) => {
                let t = parse_cell(&rec, idx, &file, row, "treatment")?;
                if t == 0.0 {
                    0
                } else if t == 1.0 {
                    1
                } else {
                    return Err(HarmonizeError::MalformedRow {
                        file,
                        row,
                        reason: format!("treatment {t} is not 0/1"),
                    });
                }
            }
            None => 0,
        };
        let label = rec.get(subgroup_idx).map(str::trim).unwrap_or("").to_string();
        if label.is_empty() {
            return Err(HarmonizeError::MalformedRow {
                file,
                row,
                reason: "empty subgroup cell".into(),
            });
        }
        let covariates = cov_idx
            .iter()
            .zip(&schema.covariates)
            .map(|(&idx, name)| parse_cell(&rec, idx, &file, row, name))
            .collect::<Result<Vec<_>>>()?;
        let weight = match weight_idx {
            Some(idx) => parse_cell(&rec, idx, &file, row, "weight")?,
            None => 1.0,
        };
        rows.push(RawRow {
            outcome,
            treatment,
            label,
            covariates,
            weight,
        });
    }
    Ok(rows)
}

/// Label ordering: lexicographic over the declared set, or over every label
/// observed in the given files.
fn resolve_labels(schema: &Schema, observed: &[&[RawRow]]) -> Vec<String> {
    let set: BTreeSet<String> = match &schema.subgroup_labels {
        Some(declared) => declared.iter().cloned().collect(),
        None => observed
            .iter()
            .flat_map(|rows| rows.iter().map(|r| r.label.clone()))
            .collect(),
    };
    set.into_iter().collect()
}

fn to_records(raw: Vec<RawRow>, labels: &[String], study: Study, file: &str) -> Result<Vec<SubjectRecord>> {
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let subgroup = labels
                .binary_search(&r.label)
                .map_err(|_| HarmonizeError::UnknownSubgroup {
                    file: file.into(),
                    row: i + 2,
                    label: r.label.clone(),
                })?;
            if study == Study::Ec && r.treatment == 1 {
                return Err(HarmonizeError::EcTreatedPatient {
                    file: file.into(),
                    row: i + 2,
                });
            }
            Ok(SubjectRecord {
                outcome: r.outcome,
                treatment: r.treatment,
                subgroup,
                covariates: r.covariates,
                study,
                weight: r.weight,
            })
        })
        .collect()
}

/// Reads and validates an RCT file and an EC file.
pub fn load_dataset(rct_csv: &Path, ec_csv: &Path, schema: &Schema) -> Result<CombinedDataset> {
    let rct_raw = read_raw(rct_csv, schema, true)?;
    let ec_raw = read_raw(ec_csv, schema, false)?;
    let labels = resolve_labels(schema, &[&rct_raw, &ec_raw]);
    let rct = to_records(rct_raw, &labels, Study::Rct, &rct_csv.display().to_string())?;
    let ec = to_records(ec_raw, &labels, Study::Ec, &ec_csv.display().to_string())?;
    CombinedDataset::new(rct, ec, labels, schema.covariates.len(), schema.family)
}

/// Reads a resampling pool. When `labels` is `None` the label set comes
/// from this file alone.
pub fn load_pool(path: &Path, schema: &Schema, study: Study, labels: Option<&[String]>) -> Result<(Vec<SubjectRecord>, Vec<String>)> {
    let raw = read_raw(path, schema, false)?;
    let labels = match labels {
        Some(l) => l.to_vec(),
        None => resolve_labels(schema, &[&raw]),
    };
    let file = path.display().to_string();
    let mut records = to_records(raw, &labels, Study::Rct, &file)?;
    for r in &mut records {
        r.study = study;
        if study == Study::Ec {
            r.treatment = 0;
        }
    }
    Ok((records, labels))
}

/// Writes records with the column names of `schema`. Reals use the
/// shortest representation that round-trips exactly.
pub fn write_records(path: &Path, records: &[SubjectRecord], labels: &[String], schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => HarmonizeError::Io {
            path: path.display().to_string(),
            source,
        },
        other => HarmonizeError::InvalidArgument(format!("{other:?}")),
    })?;
    let mut header = vec![schema.outcome.clone()];
    if let Some(t) = &schema.treatment {
        header.push(t.clone());
    }
    header.push(schema.subgroup.clone());
    header.extend(schema.covariates.iter().cloned());
    if let Some(wt) = &schema.weight {
        header.push(wt.clone());
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![fmt_real(r.outcome)];
        if schema.treatment.is_some() {
            row.push(r.treatment.to_string());
        }
        row.push(labels[r.subgroup].clone());
        row.extend(r.covariates.iter().map(|&x| fmt_real(x)));
        if schema.weight.is_some() {
            row.push(fmt_real(r.weight));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| HarmonizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

fn fmt_real(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:?}")
    }
}

/// Where subgroup prevalences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevalenceSource {
    RctEmpirical,
    UserSupplied(Vec<f64>),
}

/// Per-subgroup counts and the derived prevalence / EC-fraction quantities.
#[derive(Debug, Clone)]
pub struct DesignCounts {
    /// `counts[k][t][s]` with `s = 0` for RCT and `s = 1` for EC.
    pub counts: Vec<[[usize; 2]; 2]>,
    pub pi: DVector<f64>,
    /// Diagonal of Q: EC patients over all controls, per subgroup.
    pub q_diag: DVector<f64>,
    /// Σ_k π_k Q_kk.
    pub q_bar: f64,
    pub prevalence_source: PrevalenceSource,
}

impl DesignCounts {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self, k: usize, t: usize, study: Study) -> usize {
        self.counts[k][t][study_index(study)]
    }

    /// n_{·,t}^{(s)}.
    pub fn n_arm(&self, t: usize, study: Study) -> usize {
        self.counts.iter().map(|c| c[t][study_index(study)]).sum()
    }

    /// n_{k,0}^{(r+e)}.
    pub fn n_control_pooled(&self, k: usize) -> usize {
        self.counts[k][0][0] + self.counts[k][0][1]
    }

    /// q = n_{·,0}^{(e)} / n_{·,0}^{(r+e)}.
    pub fn q_overall(&self) -> f64 {
        let e = self.n_arm(0, Study::Ec) as f64;
        let r = self.n_arm(0, Study::Rct) as f64;
        e / (r + e)
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q_diag)
    }

    pub fn pi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pi)
    }
}

fn study_index(s: Study) -> usize {
    match s {
        Study::Rct => 0,
        Study::Ec => 1,
    }
}

pub fn compute_design_counts(ds: &CombinedDataset, source: &PrevalenceSource) -> Result<DesignCounts> {
    let k = ds.k();
    let mut counts = vec![[[0usize; 2]; 2]; k];
    for r in ds.rows() {
        counts[r.subgroup][r.treatment as usize][study_index(r.study)] += 1;
    }
    let pi = match source {
        PrevalenceSource::RctEmpirical => {
            let n: usize = ds.rct().len();
            if n == 0 {
                return Err(HarmonizeError::EmptyArm { arm: "RCT" });
            }
            let raw = DVector::from_iterator(k, counts.iter().map(|c| (c[0][0] + c[1][0]) as f64 / n as f64));
            let total = raw.sum();
            raw / total
        }
        PrevalenceSource::UserSupplied(p) => {
            if p.len() != k {
                return Err(HarmonizeError::InconsistentDimensions(format!(
                    "prevalence vector has length {}, expected {k}",
                    p.len()
                )));
            }
            if p.iter().any(|&x| !(x > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(HarmonizeError::InvalidArgument(
                    "user-supplied prevalences must be strictly positive and sum to 1".into(),
                ));
            }
            DVector::from_column_slice(p)
        }
    };
    let mut q_diag = DVector::zeros(k);
    for (j, c) in counts.iter().enumerate() {
        let pooled = c[0][0] + c[0][1];
        if pooled == 0 {
            return Err(HarmonizeError::EmptySubgroup { subgroup: j });
        }
        q_diag[j] = (c[0][1] + c[1][1]) as f64 / pooled as f64;
    }
    let q_bar = pi.dot(&q_diag);
    Ok(DesignCounts {
        counts,
        pi,
        q_diag,
        q_bar,
        prevalence_source: source.clone(),
    })
}
