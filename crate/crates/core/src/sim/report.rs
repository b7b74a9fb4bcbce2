//! Report serialization. Output contains no timestamps or host details, so
//! identical runs give identical bytes.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{HarmonizeError, Result};

use super::monte_carlo::MonteCarloReport;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarmonizeError + '_ {
    move |source| HarmonizeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Long format: scenario, estimator, subgroup, metric, value, mc_se.
pub fn write_report_csv(report: &MonteCarloReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "estimator", "subgroup", "metric", "value", "mc_se"])?;
    for r in &report.rows {
        w.write_record([
            report.scenario.as_str(),
            &r.estimator,
            &r.subgroup,
            &r.metric,
            &r.value.to_string(),
            &r.mc_se.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_report_json(report: &MonteCarloReport, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n").map_err(io_err(path))
}

/// One row per (replicate, estimator, subgroup) for successful replicates.
pub fn write_replicates_csv(report: &MonteCarloReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["replicate", "estimator", "subgroup", "estimate"])?;
    for rep in &report.replicates {
        for (e, label) in report.estimators.iter().enumerate() {
            for (j, sub) in report.labels.iter().enumerate() {
                w.write_record([&rep.index.to_string(), label, sub, &rep.estimates[e][j].to_string()])?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}
