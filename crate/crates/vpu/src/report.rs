//! Evaluation outputs: metrics JSON, the mIoU-versus-interactions CSV and
//! one JSON log per session.

use std::fs;
use std::path::Path;

use vpu_core::interact::{MetricsReport, SessionRecord};

use crate::error::{AppError, Result};

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| AppError::Invalid(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}

pub fn write_curve(path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(path, report.curve_csv()).map_err(|e| AppError::io(path, e))
}

/// `<dir>/<instance_id>.json` per record.
pub fn write_sessions(dir: &Path, records: &[SessionRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    for r in records {
        write_json(&dir.join(format!("{}.json", r.instance_id)), r)?;
    }
    Ok(())
}
