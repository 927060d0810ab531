//! Artifact writers: RFC-4180 CSV with 17-significant-digit floats, and
//! deterministic JSON documents.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::flow::TrajectoryRecord;

/// `{:.16e}` keeps 17 significant digits, enough to round-trip every f64.
pub(super) fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // RFC-4180 has no float vocabulary; emit the debug names verbatim.
        format!("{v}")
    }
}

pub(super) struct CsvSink {
    writer: csv::Writer<fs::File>,
    rel_path: String,
}

impl CsvSink {
    pub fn create(dir: &Path, rel_path: &str) -> Result<Self> {
        let path = dir.join(rel_path);
        let writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(&path)?;
        Ok(Self { writer, rel_path: rel_path.to_string() })
    }

    pub fn header(&mut self, cols: &[&str]) -> Result<()> {
        self.writer.write_record(cols)?;
        Ok(())
    }

    /// One record of already-formatted fields.
    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<String> {
        self.writer.flush()?;
        Ok(self.rel_path)
    }
}

/// Writes a trajectory record as `t, x1..xn, feas, obj` rows.
pub(super) fn write_record_csv(dir: &Path, rel_path: &str, rec: &TrajectoryRecord) -> Result<String> {
    let n = rec.samples.first().map(|s| s.x.len()).unwrap_or(0);
    let mut sink = CsvSink::create(dir, rel_path)?;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.push("feas".into());
    cols.push("obj".into());
    sink.header(&cols.iter().map(String::as_str).collect::<Vec<_>>())?;
    for s in &rec.samples {
        let mut row = Vec::with_capacity(n + 3);
        row.push(fmt_float(s.t));
        row.extend(s.x.iter().map(|v| fmt_float(*v)));
        row.push(fmt_float(s.feas));
        row.push(fmt_float(s.obj));
        sink.row(&row)?;
    }
    sink.finish()
}

/// Serializes a value as pretty JSON with a trailing newline.
pub(super) fn write_json<T: Serialize>(dir: &Path, rel_path: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(rel_path), text)?;
    Ok(rel_path.to_string())
}

/// Summary entry for one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub label: String,
    pub kind: String,
    /// `"ok"` or `"failed"`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Artifact files, relative to the output directory.
    pub files: Vec<String>,
    /// Scalar results worth reading without opening the artifacts.
    pub key_numbers: BTreeMap<String, f64>,
    /// Named boolean outcomes (certificate validity, test verdicts).
    pub verdicts: BTreeMap<String, bool>,
}

/// Whole-run summary, written as `summary.json`. Contains no wall-clock
/// information so that repeated runs are byte-identical; timings go to the
/// `timing.json` sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub problem: String,
    pub n_experiments: usize,
    pub n_failed: usize,
    pub experiments: Vec<ExperimentSummary>,
    /// Evidence grade of every sampled estimate in the artifacts.
    pub grade: &'static str,
}

/// Wall-clock sidecar, deliberately separate from the deterministic summary.
#[derive(Debug, Clone, Serialize)]
pub struct TimingSidecar {
    pub total_seconds: f64,
    pub experiment_seconds: BTreeMap<String, f64>,
}

pub(super) fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
