use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::trial::{ExperimentReport, Phase, RunRecord};
use super::FilterKind;
use crate::error::{Error, Result};

/// One row of a per-trial run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: Phase,
    pub rmse_vs_truth: f64,
    pub ensemble_spread: f64,
    pub obs_mask_hash: Option<u64>,
}

/// Writes `step,phase,rmse_vs_truth,ensemble_spread,obs_mask_hash`, one row
/// per recorded step. The hash is empty where nothing was observed.
pub fn write_run_log<W: Write>(out: W, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for i in 0..record.rmse.len() {
        w.serialize(LogRow {
            step: record.first_step + i,
            phase: record.phase[i],
            rmse_vs_truth: record.rmse[i],
            ensemble_spread: record.spread[i],
            obs_mask_hash: record.mask_hash[i],
        })?;
    }
    if record.rmse.is_empty() {
        w.write_record(["step", "phase", "rmse_vs_truth", "ensemble_spread", "obs_mask_hash"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_log<R: Read>(input: R) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows: Vec<LogRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for pair in rows.windows(2) {
        if pair[1].step != pair[0].step + 1 {
            return Err(Error::Parse(format!("run log skips from step {} to {}", pair[0].step, pair[1].step)));
        }
    }
    Ok(rows)
}

/// Per-step mean RMSE, one column per report, keyed by report label.
pub fn write_step_report<W: Write>(out: W, reports: &[&ExperimentReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::arg("step report needs at least one experiment"));
    };
    for r in reports {
        if r.first_step != first.first_step || r.mean_trace.len() != first.mean_trace.len() {
            return Err(Error::arg(format!(
                "`{}` covers a different step range than `{}`",
                r.label, first.label
            )));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    w.write_record(&header)?;
    for i in 0..first.mean_trace.len() {
        let mut row = vec![(first.first_step + i).to_string()];
        row.extend(reports.iter().map(|r| r.mean_trace[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mean_mse: f64,
    pub mean_rmse: f64,
    pub failures: usize,
}

fn table_rank(f: FilterKind) -> usize {
    match f {
        FilterKind::NoneLtp => 0,
        FilterKind::Ssp => 1,
        FilterKind::Ensf => 2,
        FilterKind::Enkf => 3,
    }
}

/// Summary rows in the order No Filtering, NN Testing, EnSF, EnSF Obs.,
/// EnSF Non-Obs., EnKF. Labels that differ from the method name are
/// appended in parentheses.
pub fn summary_rows(reports: &[&ExperimentReport]) -> Vec<SummaryRow> {
    let mut sorted: Vec<&&ExperimentReport> = reports.iter().collect();
    sorted.sort_by_key(|r| table_rank(r.filter));
    let mut rows = Vec::new();
    for r in sorted {
        let suffix = if r.label == r.filter.name() {
            String::new()
        } else {
            format!(" ({})", r.label)
        };
        let st = &r.stats;
        let mut push = |name: &str, mse: f64, rmse: f64| {
            rows.push(SummaryRow {
                method: format!("{name}{suffix}"),
                mean_mse: mse,
                mean_rmse: rmse,
                failures: r.failures,
            })
        };
        match r.filter {
            FilterKind::NoneLtp => push("No Filtering", st.mse, st.rmse),
            FilterKind::Ssp => push("NN Testing", st.mse, st.rmse),
            FilterKind::Ensf => {
                push("EnSF", st.mse, st.rmse);
                push("EnSF Obs.", st.mse_obs, st.rmse_obs);
                push("EnSF Non-Obs.", st.mse_non_obs, st.rmse_non_obs);
            }
            FilterKind::Enkf => push("EnKF", st.mse, st.rmse),
        }
    }
    rows
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "mean_mse", "mean_rmse", "failures"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.mean_mse.to_string(),
            r.mean_rmse.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
