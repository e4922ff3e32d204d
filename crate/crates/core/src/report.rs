//! Comparison tables across campaign result directories.
//!
//! A result directory holds `summary.json` (a [`CampaignRecord`]) and
//! `rounds.csv`. The report is long format: one row per directory, sorted so
//! the three variants of one setting sit next to each other.

use crate::dram::SchemeId;
use crate::nn::suite::Variant;
use crate::nn::TaskKind;
use crate::scanner::{CampaignSummary, ROUND_COLUMNS};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SUMMARY_SCHEMA: &str = "radflip-campaign/1";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROUNDS_FILE: &str = "rounds.csv";

pub const REPORT_COLUMNS: [&str; 11] = [
    "mapping",
    "task",
    "variant",
    "area",
    "n_bits",
    "rounds",
    "baseline",
    "model_crash_pct",
    "average",
    "minimum",
    "maximum",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no result directories given")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: schema mismatch: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Write(#[from] std::io::Error),
}

/// What a campaign run writes next to its per-round CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub schema: String,
    pub mapping: SchemeId,
    pub task: TaskKind,
    pub variant: Variant,
    pub summary: CampaignSummary,
}

impl CampaignRecord {
    pub fn new(mapping: SchemeId, task: TaskKind, variant: Variant, summary: CampaignSummary) -> Self {
        CampaignRecord { schema: SUMMARY_SCHEMA.into(), mapping, task, variant, summary }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mapping: String,
    pub task: TaskKind,
    pub variant: Variant,
    pub area: String,
    pub n_bits: usize,
    pub rounds: usize,
    pub baseline: f64,
    pub model_crash_pct: f64,
    pub average: Option<f64>,
    pub minimum: Option<f64>,
    pub maximum: Option<f64>,
}

impl From<&CampaignRecord> for ReportRow {
    fn from(r: &CampaignRecord) -> Self {
        let s = &r.summary;
        ReportRow {
            mapping: r.mapping.to_string().to_lowercase(),
            task: r.task,
            variant: r.variant,
            area: s.area.clone(),
            n_bits: s.total_bits,
            rounds: s.rounds,
            baseline: s.baseline,
            model_crash_pct: 100.0 * s.crash_rate,
            average: s.mean,
            minimum: s.min,
            maximum: s.max,
        }
    }
}

/// Reads one result directory, checking both files against the schema.
pub fn load_result_dir(dir: &Path) -> Result<CampaignRecord, ReportError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| ReportError::Io { path: path.clone(), source })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| ReportError::Json { path: path.clone(), source })?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(SUMMARY_SCHEMA) => {}
        other => {
            return Err(ReportError::Schema { path, reason: format!("schema {other:?}, expected {SUMMARY_SCHEMA:?}") })
        }
    }
    let record: CampaignRecord =
        serde_json::from_value(value).map_err(|source| ReportError::Json { path: path.clone(), source })?;

    let rounds = dir.join(ROUNDS_FILE);
    let mut rdr = csv::Reader::from_path(&rounds).map_err(|e| ReportError::Schema {
        path: rounds.clone(),
        reason: e.to_string(),
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != ROUND_COLUMNS {
        return Err(ReportError::Schema { path: rounds, reason: format!("columns {header:?}") });
    }
    let n = rdr.records().count();
    if n != record.summary.rounds {
        return Err(ReportError::Schema {
            path: rounds,
            reason: format!("{n} rows but the summary lists {} rounds", record.summary.rounds),
        });
    }
    Ok(record)
}

/// Rows ordered by mapping, task, area, budget, then variant.
pub fn build_report(records: &[CampaignRecord]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = records.iter().map(ReportRow::from).collect();
    rows.sort_by(|a, b| {
        (&a.mapping, a.task as u8, &a.area, a.n_bits, a.variant).cmp(&(&b.mapping, b.task as u8, &b.area, b.n_bits, b.variant))
    });
    rows
}

pub fn report_dirs(dirs: &[PathBuf]) -> Result<Vec<ReportRow>, ReportError> {
    if dirs.is_empty() {
        return Err(ReportError::Empty);
    }
    let records = dirs.iter().map(|d| load_result_dir(d)).collect::<Result<Vec<_>, _>>()?;
    Ok(build_report(&records))
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.mapping.clone(),
            r.task.to_string(),
            r.variant.to_string(),
            r.area.clone(),
            r.n_bits.to_string(),
            r.rounds.to_string(),
            format!("{:.4}", r.baseline),
            format!("{:.4}", r.model_crash_pct),
            cell(r.average),
            cell(r.minimum),
            cell(r.maximum),
        ])?;
    }
    out.flush()?;
    Ok(())
}
