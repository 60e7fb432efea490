use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What produced a set of metrics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

/// Ordered metric series; rejects non-finite values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn new(provenance: Provenance) -> Self {
        MetricsReport {
            entries: Vec::new(),
            provenance,
        }
    }

    pub fn push(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("metric {name} at step {step} is {value}")));
        }
        self.entries.push(MetricEntry {
            step,
            name: name.to_string(),
            value,
        });
        Ok(())
    }

    /// Values of one metric in insertion order.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.name == name)
            .map(|e| (e.step, e.value))
            .collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.entries.iter().rev().find(|e| e.name == name).map(|e| e.value)
    }

    /// `step,name,value` lines with a header; values use shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,name,value\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.step, e.name, e.value));
        }
        s
    }

    pub fn from_csv(text: &str, provenance: Provenance) -> Result<Self> {
        let mut report = MetricsReport::new(provenance);
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Contract(format!("malformed metrics line {}: {line}", i + 1));
            let mut parts = line.splitn(3, ',');
            let step = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let name = parts.next().ok_or_else(bad)?;
            let value = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            report.push(step, name, value)?;
        }
        Ok(report)
    }
}
