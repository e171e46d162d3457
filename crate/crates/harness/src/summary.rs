//! Metric files and their window summaries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use ppo_dynamics::diagnostics::{window_aggregate, DiagnosticsRecord, WindowMode, WINDOW_FRAC};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Metric whose summary uses the last-nontrivial-ratio window.
pub const EXCESS_RATIO_KEY: &str = "ratio.excess_ratio";

/// Append-only JSON Lines sink, flushed after every record so an aborted
/// run keeps everything written so far.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &DiagnosticsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn emit_metrics(records: &[DiagnosticsRecord], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<Value>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Numeric leaves of a record as dotted keys; `null` leaves map to `None`.
/// Booleans and strings are skipped.
pub fn flatten_record(record: &Value) -> BTreeMap<String, Option<f64>> {
    fn walk(v: &Value, prefix: String, out: &mut BTreeMap<String, Option<f64>>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(v, key, out);
                }
            }
            Value::Number(n) => {
                out.insert(prefix, n.as_f64());
            }
            Value::Null => {
                out.insert(prefix, None);
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    walk(record, String::new(), &mut out);
    out
}

/// `(step, value)` pairs of one dotted metric across records.
pub fn metric_series(records: &[Value], key: &str) -> Vec<(u64, Option<f64>)> {
    records
        .iter()
        .filter_map(|r| {
            let step = r.get("step")?.as_u64()?;
            let flat = flatten_record(r);
            Some((step, flat.get(key).copied().flatten()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_length: u64,
    pub window_frac: f64,
    pub records: usize,
    /// Mean of each metric over the final window of training progress.
    pub tail: BTreeMap<String, Option<f64>>,
    /// Excess ratio averaged over the window ending at the last step that
    /// still has enough non-trivial ratios.
    pub excess_ratio_last_nontrivial: Option<f64>,
}

pub fn summarize(records: &[Value], run_length: u64, window_frac: f64) -> Summary {
    let mut keys: Vec<String> = records.iter().flat_map(|r| flatten_record(r).into_keys()).collect();
    keys.sort();
    keys.dedup();
    keys.retain(|k| k != "step" && k != "batch");
    let tail = keys
        .into_iter()
        .map(|k| {
            let series = metric_series(records, &k);
            let v = window_aggregate(&series, run_length, window_frac, WindowMode::Tail);
            (k, v)
        })
        .collect();
    let excess = metric_series(records, EXCESS_RATIO_KEY);
    Summary {
        run_length,
        window_frac,
        records: records.len(),
        tail,
        excess_ratio_last_nontrivial: window_aggregate(&excess, run_length, window_frac, WindowMode::LastNontrivialRatio),
    }
}

pub fn summarize_file(metrics: &Path, run_length: u64) -> Result<Summary> {
    Ok(summarize(&read_metrics(metrics)?, run_length, WINDOW_FRAC))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
