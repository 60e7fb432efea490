//! Sample dumps, metrics files and run manifests.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use robustdiff::{MetricsReport, Tensor};

use crate::error::CliError;

/// One sample per line, columns separated by single spaces, shortest
/// round-trip float formatting.
pub fn format_samples(x: &Tensor) -> String {
    let mut out = String::with_capacity(x.len() * 20);
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v:?}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn parse_samples(text: &str) -> Result<Tensor, String> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format!("line {}: '{tok}' is not a number", lineno + 1))?;
            if !v.is_finite() {
                return Err(format!("line {}: non-finite value {tok}", lineno + 1));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(format!("line {}: {width} columns, expected {c}", lineno + 1));
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or("no samples")?;
    Tensor::new(vec![rows, cols], data).map_err(|e| e.to_string())
}

pub fn read_samples(path: &Path) -> Result<Tensor, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_samples(&text).map_err(|msg| CliError::format(path, msg))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Load a metrics CSV, keeping only entries at or before `max_step`.
pub fn read_metrics_prefix(path: &Path, max_step: u64) -> Result<MetricsReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut report =
        MetricsReport::from_csv(&text, Default::default()).map_err(|e| CliError::format(path, e.to_string()))?;
    report.entries.retain(|e| e.step <= max_step);
    Ok(report)
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    /// SHA-256 of the resolved configuration text.
    pub config_hash: String,
    pub seed: u64,
    pub updates: u64,
    pub checkpoint_sha256: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_text_round_trips_exactly() {
        let x = Tensor::new(vec![2, 2], vec![0.1 + 0.2, -1e-300, 3.0, std::f64::consts::PI]).unwrap();
        let text = format_samples(&x);
        assert_eq!(text, "0.30000000000000004 -1e-300\n3.0 3.141592653589793\n");
        assert_eq!(parse_samples(&text).unwrap(), x);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_samples("1 2\n3\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_samples("").is_err());
        assert!(parse_samples("1 nan\n").is_err());
    }
}
