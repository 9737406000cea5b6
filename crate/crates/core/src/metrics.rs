//! Per-step training telemetry: a line-delimited JSON stream and a lossless
//! CSV export of the same fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Telemetry for one training step. Reward fields are means over all
/// completions sampled in the step; `eval_accuracy` is present only on
/// steps where evaluation was scheduled. Step 0 is the pre-training
/// evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub reward_accuracy: f64,
    pub reward_format: f64,
    pub reward_cosine: f64,
    pub reward_repetition: f64,
    pub reward_overlong: f64,
    pub reward_total: f64,
    pub mean_length: f64,
    pub max_length: usize,
    pub truncated_fraction: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub eval_accuracy: Option<f64>,
}

impl StepMetrics {
    /// Blank record carrying only an evaluation result, used for step 0.
    pub fn eval_only(step: u64, eval_accuracy: f64) -> Self {
        Self {
            step,
            reward_accuracy: 0.0,
            reward_format: 0.0,
            reward_cosine: 0.0,
            reward_repetition: 0.0,
            reward_overlong: 0.0,
            reward_total: 0.0,
            mean_length: 0.0,
            max_length: 0,
            truncated_fraction: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
            clip_fraction: 0.0,
            eval_accuracy: Some(eval_accuracy),
        }
    }
}

/// Column order shared by the CSV export and its parser.
pub const CSV_COLUMNS: [&str; 14] = [
    "step",
    "reward_accuracy",
    "reward_format",
    "reward_cosine",
    "reward_repetition",
    "reward_overlong",
    "reward_total",
    "mean_length",
    "max_length",
    "truncated_fraction",
    "loss",
    "grad_norm",
    "clip_fraction",
    "eval_accuracy",
];

/// Appends one metrics record as a JSON line.
pub fn write_record(out: &mut impl Write, record: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads a line-delimited metrics file; errors name the offending line.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::MetricsParse { line: index + 1, message: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Converts a metrics file to CSV, one column per field and one row per
/// record. Floats use the shortest round-trip decimal form; a missing
/// evaluation renders as an empty cell.
pub fn export_csv(metrics_path: &Path, csv_path: &Path) -> Result<usize> {
    let records = read_metrics(metrics_path)?;
    let mut out = BufWriter::new(File::create(csv_path)?);
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for record in &records {
        let eval = record.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            record.step,
            record.reward_accuracy,
            record.reward_format,
            record.reward_cosine,
            record.reward_repetition,
            record.reward_overlong,
            record.reward_total,
            record.mean_length,
            record.max_length,
            record.truncated_fraction,
            record.loss,
            record.grad_norm,
            record.clip_fraction,
            eval,
        )?;
    }
    out.flush()?;
    Ok(records.len())
}

/// Parses a CSV file produced by [`export_csv`] back into records.
pub fn parse_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::MetricsParse { line: 1, message: "missing CSV header".into() })?;
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::MetricsParse { line: 1, message: format!("unexpected header {header:?}") });
    }
    let mut records = Vec::new();
    for (index, line) in lines.enumerate() {
        let line_no = index + 2;
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(Error::MetricsParse {
                line: line_no,
                message: format!("expected {} fields, found {}", CSV_COLUMNS.len(), fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::MetricsParse {
                line: line_no,
                message: format!("bad {}: {e}", CSV_COLUMNS[i]),
            })
        };
        let record = StepMetrics {
            step: fields[0].parse::<u64>().map_err(|e| Error::MetricsParse {
                line: line_no,
                message: format!("bad step: {e}"),
            })?,
            reward_accuracy: num(1)?,
            reward_format: num(2)?,
            reward_cosine: num(3)?,
            reward_repetition: num(4)?,
            reward_overlong: num(5)?,
            reward_total: num(6)?,
            mean_length: num(7)?,
            max_length: fields[8].parse::<usize>().map_err(|e| Error::MetricsParse {
                line: line_no,
                message: format!("bad max_length: {e}"),
            })?,
            truncated_fraction: num(9)?,
            loss: num(10)?,
            grad_norm: num(11)?,
            clip_fraction: num(12)?,
            eval_accuracy: if fields[13].is_empty() { None } else { Some(num(13)?) },
        };
        records.push(record);
    }
    Ok(records)
}
