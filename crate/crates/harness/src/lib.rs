//! Experiment harness: config files, sweeps over seeds and variants, metric
//! files and their summaries, and cross-run correlation of metrics.

pub mod config;
pub mod run;
pub mod summary;

use std::path::Path;

use anyhow::{bail, Context, Result};
use ppo_dynamics::diagnostics::{ewma_smooth, rank_correlations, CorrelationSummary};
use ppo_dynamics::ppo::TrainConfig;

pub use config::{parse_override, ConfigError, RunConfig, Variant};
pub use run::{run_experiment, run_single, RunEntry, RunManifest, RunResult};
pub use summary::{emit_metrics, metric_series, read_metrics, summarize, Summary};

/// Aligned values of two metrics in one run: records where both exist.
pub fn paired_series(dir: &Path, x: &str, y: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let records = read_metrics(&dir.join(run::METRICS_FILE))?;
    let xs = metric_series(&records, x);
    let ys = metric_series(&records, y);
    Ok(xs
        .into_iter()
        .zip(ys)
        .filter_map(|((_, a), (_, b))| Some((a?, b?)))
        .unzip())
}

/// Penultimate width recorded in a run's config.
pub fn run_feature_width(dir: &Path) -> Result<usize> {
    let path = dir.join(run::CONFIG_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = toml::from_str(&text)?;
    cfg.network.hidden_widths.last().copied().context("config has no hidden layers")
}

/// Correlations between metrics `x` and `y` over the given runs, after
/// optional EWMA smoothing. Runs with fewer than two aligned values are
/// skipped; at least one must remain.
pub fn correlate_runs(dirs: &[&Path], x: &str, y: &str, width: Option<usize>, smooth: Option<f64>) -> Result<CorrelationSummary> {
    let mut pairs = Vec::new();
    let mut w = width;
    for dir in dirs {
        let (mut a, mut b) = paired_series(dir, x, y)?;
        if a.len() < 2 {
            continue;
        }
        if let Some(c) = smooth {
            a = ewma_smooth(&a, c)?;
            b = ewma_smooth(&b, c)?;
        }
        if w.is_none() {
            w = Some(run_feature_width(dir)?);
        }
        pairs.push((a, b));
    }
    if pairs.is_empty() {
        bail!("no run has two or more records with both `{x}` and `{y}`");
    }
    Ok(rank_correlations(&pairs, w.unwrap_or(1))?)
}
