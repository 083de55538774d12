//! Report files: `records.csv`, `summary.json` and per-scenario series CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Scenario};
use crate::harness::experiment::{
    Aggregate, ExperimentKind, PValue, ScenarioStats, SeriesTrace,
};

pub const RECORD_COLUMNS: [&str; 11] = [
    "series_id",
    "delta",
    "scenario",
    "j_orig",
    "j_adv",
    "max_u_orig",
    "max_u_adv",
    "l1_orig",
    "l1_adv",
    "norm_used",
    "flags",
];

#[derive(Serialize)]
struct Summary<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: ExperimentKind,
    seed: u64,
    records: usize,
    aggregates: &'a [Aggregate],
    p_values: &'a [PValue],
    infeasible: &'a std::collections::BTreeMap<String, usize>,
    skipped_windows: &'a [String],
    action_box: &'a Option<(Vec<f64>, Vec<f64>)>,
    config: &'a ExperimentConfig,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub series: Vec<PathBuf>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Data(format!("failed to write {}: {other:?}", path.display())),
    }
}

pub fn write_records_csv(path: &Path, stats: &ScenarioStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(RECORD_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in &stats.records {
        w.write_record([
            r.series_id.clone(),
            r.delta.to_string(),
            r.scenario.name().to_string(),
            r.j_orig.to_string(),
            r.j_adv.to_string(),
            r.max_u_orig.to_string(),
            r.max_u_adv.to_string(),
            r.l1_orig.to_string(),
            r.l1_adv.to_string(),
            r.norm_used.to_string(),
            r.flags.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_traces(path: &Path, traces: &[&SeriesTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["series_id", "t", "original", "attacked", "u_orig", "u_adv"])
        .map_err(|e| csv_err(path, e))?;
    let fmt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for tr in traces {
        let len = tr.original.len().max(tr.u_orig.len());
        for t in 0..len {
            w.write_record([
                tr.series_id.clone(),
                t.to_string(),
                fmt(tr.original.get(t)),
                fmt(tr.attacked.get(t)),
                fmt(tr.u_orig.get(t)),
                fmt(tr.u_adv.get(t)),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every report file under `out_dir`, creating it if needed.
pub fn emit_report(
    stats: &ScenarioStats,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = out_dir.join("records.csv");
    write_records_csv(&records, stats)?;

    let summary_path = out_dir.join("summary.json");
    let summary = Summary {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        experiment: stats.kind,
        seed: cfg.seed,
        records: stats.records.len(),
        aggregates: &stats.aggregates,
        p_values: &stats.p_values,
        infeasible: &stats.infeasible,
        skipped_windows: &stats.skipped_windows,
        action_box: &stats.action_box,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Data(format!("cannot serialize summary: {e}")))?;
    fs::write(&summary_path, text + "\n").map_err(|e| Error::io(&summary_path, e))?;

    let series_dir = out_dir.join("series");
    fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;
    let mut keys: Vec<(Scenario, f64)> = Vec::new();
    for tr in &stats.traces {
        if !keys.iter().any(|(s, d)| *s == tr.scenario && *d == tr.delta) {
            keys.push((tr.scenario, tr.delta));
        }
    }
    let mut series = Vec::new();
    for (scenario, delta) in keys {
        let path = series_dir.join(format!("{}_delta_{}.csv", scenario.name(), delta));
        let traces: Vec<&SeriesTrace> = stats
            .traces
            .iter()
            .filter(|t| t.scenario == scenario && t.delta == delta)
            .collect();
        write_traces(&path, &traces)?;
        series.push(path);
    }
    Ok(ReportFiles {
        records,
        summary: summary_path,
        series,
    })
}
