//! Report rows and their CSV/JSON encodings.
//!
//! CSV output uses a fixed header order, `.` as decimal separator and LF
//! line endings. Floats are written in shortest round-trip form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};

pub const COMPARISON_HEADER: [&str; 11] = [
    "method",
    "task",
    "split",
    "accuracy",
    "loss",
    "alpha",
    "aggregator",
    "iterations",
    "epochs_per_iteration",
    "seed",
    "config_hash",
];

/// One (method, task) measurement. `task == "average"` rows hold the
/// per-method means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub task: String,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub alpha: Option<f64>,
    pub aggregator: String,
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub const AVERAGE_TASK: &str = "average";

impl ReportRow {
    pub fn is_average(&self) -> bool {
        self.task == AVERAGE_TASK
    }

    /// Total finetuning epochs per task behind this row.
    pub fn budget(&self) -> usize {
        self.iterations * self.epochs_per_iteration
    }
}

/// Per-iteration trace of an ATM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub method: String,
    pub iteration: usize,
    pub task: String,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub task_vector_norm: f64,
    pub config_hash: String,
}

/// Spread of one method's average accuracy across budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub method: String,
    pub min_average: f64,
    pub max_average: f64,
    pub spread: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| AtmError::Encode(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| AtmError::Encode(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn to_json<R: Serialize + ?Sized>(value: &R) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn encode<R: Serialize>(rows: &[R], format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(rows),
        Format::Json => to_json(rows),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AtmError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| AtmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            method: "TA".into(),
            task: "task0".into(),
            split: "test".into(),
            accuracy: 0.75,
            loss: 0.1,
            alpha: Some(0.4),
            aggregator: "sum_ta".into(),
            iterations: 1,
            epochs_per_iteration: 10,
            seed: 3,
            config_hash: "00000000deadbeef".into(),
        }
    }

    #[test]
    fn csv_header_and_line_endings() {
        let none = ReportRow {
            alpha: None,
            ..row()
        };
        let text = to_csv(&[row(), none]).unwrap();
        let mut lines = text.split('\n');
        assert_eq!(lines.next().unwrap(), COMPARISON_HEADER.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "TA,task0,test,0.75,0.1,0.4,sum_ta,1,10,3,00000000deadbeef"
        );
        assert_eq!(lines.next().unwrap(), "TA,task0,test,0.75,0.1,,sum_ta,1,10,3,00000000deadbeef");
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
    }
}
