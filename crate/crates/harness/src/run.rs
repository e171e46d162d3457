//! Running experiments and laying out their artifacts.
//!
//! ```text
//! <output_dir>/<name>/manifest.json
//! <output_dir>/<name>/<variant>/seed_<n>/config.toml
//!                                        metrics.jsonl
//!                                        summary.json
//!                                        normalizer.json   (if used)
//!                                        checkpoints/step_<step>.bin
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use ppo_dynamics::networks::save_checkpoint;
use ppo_dynamics::ppo::{train, TrainConfig, TrainEvent};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::summary::{summarize_file, write_json, MetricsWriter};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:010}.bin")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub variant: String,
    pub overrides: BTreeMap<String, toml::Value>,
    pub seed: u64,
    pub dir: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

/// Written before any training starts. Rewritten only to append failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// The resolved config; written back as TOML it parses to the same
    /// experiment.
    pub config: serde_json::Value,
    pub runs: Vec<RunEntry>,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub entry: RunEntry,
    pub outcome: std::result::Result<usize, String>,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=+-".contains(c) { c } else { '_' })
        .collect()
}

pub fn run_dir(root: &Path, variant: &str, seed: u64) -> PathBuf {
    root.join(sanitize(variant)).join(format!("seed_{seed}"))
}

/// Trains one seed of one variant into `dir`, returning the record count.
pub fn run_single(train_cfg: &TrainConfig, dir: &Path, save_checkpoints: bool) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_text = toml::to_string(train_cfg).context("serializing run config")?;
    std::fs::write(dir.join(CONFIG_FILE), config_text)?;
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    if save_checkpoints {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut sink_error: Option<anyhow::Error> = None;
    let mut on_event = |ev: TrainEvent<'_>| -> ppo_dynamics::Result<()> {
        let res = match ev {
            TrainEvent::Record(r) => writer.write(r),
            TrainEvent::Checkpoint { step, agent, .. } if save_checkpoints => {
                save_checkpoint(&ckpt_dir.join(checkpoint_name(step)), agent).map_err(anyhow::Error::from)
            }
            TrainEvent::Checkpoint { .. } => Ok(()),
        };
        res.map_err(|e| {
            let msg = format!("{e:#}");
            sink_error = Some(e);
            ppo_dynamics::Error::Config(format!("output failed: {msg}"))
        })
    };
    let outcome = train(train_cfg, &mut on_event);
    drop(on_event);
    let run_length = train_cfg.n_batches() * train_cfg.batch_size() as u64;
    let summary = summarize_file(&metrics_path, run_length)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    let outcome = outcome?;
    if let Some(n) = &outcome.normalizer {
        write_json(&dir.join(NORMALIZER_FILE), n)?;
    }
    Ok(outcome.records)
}

fn entry(root: &Path, variant: &Variant, seed: u64, save_checkpoints: bool) -> RunEntry {
    let dir = run_dir(root, &variant.label, seed);
    RunEntry {
        variant: variant.label.clone(),
        overrides: variant.overrides.clone(),
        seed,
        config: dir.join(CONFIG_FILE),
        metrics: dir.join(METRICS_FILE),
        summary: dir.join(SUMMARY_FILE),
        checkpoints: save_checkpoints.then(|| dir.join(CHECKPOINT_DIR)),
        dir,
    }
}

/// Root directory of an experiment's artifacts.
pub fn experiment_root(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(sanitize(&cfg.name))
}

/// Runs every variant for every seed. Runs execute through the config's
/// execution policy; each writes only inside its own directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RunResult>> {
    let root = experiment_root(cfg);
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let variants = cfg.variants()?;
    let root_ref = root.as_path();
    let jobs: Vec<(RunEntry, TrainConfig)> = variants
        .iter()
        .flat_map(|v| {
            cfg.seeds.iter().map(move |&seed| {
                let mut t = v.train.clone();
                t.seed = seed;
                (entry(root_ref, v, seed, cfg.save_checkpoints), t)
            })
        })
        .collect();
    let manifest = Mutex::new(RunManifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.clone(),
        config: serde_json::to_value(cfg.to_table()?)?,
        runs: jobs.iter().map(|(e, _)| e.clone()).collect(),
        failures: Vec::new(),
    });
    let manifest_path = root.join(MANIFEST_FILE);
    write_json(&manifest_path, &*manifest.lock().expect("manifest lock"))?;

    let save = cfg.save_checkpoints;
    let results = cfg.train.execution.map(jobs, |(entry, t)| {
        let outcome = run_single(&t, &entry.dir, save).map_err(|e| format!("{e:#}"));
        if let Err(msg) = &outcome {
            let mut m = manifest.lock().expect("manifest lock");
            m.failures.push(RunFailure {
                variant: entry.variant.clone(),
                seed: entry.seed,
                error: msg.clone(),
            });
            m.failures.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
            // Best effort: the run's own error is what gets reported.
            let _ = write_json(&manifest_path, &*m);
        }
        RunResult { entry, outcome }
    });
    Ok(results)
}

/// Recomputes `summary.json` of a run directory from its metrics file.
pub fn resummarize(dir: &Path) -> Result<crate::summary::Summary> {
    let text = std::fs::read_to_string(dir.join(CONFIG_FILE)).with_context(|| format!("reading {}", dir.join(CONFIG_FILE).display()))?;
    let cfg: TrainConfig = toml::from_str(&text)?;
    let summary = summarize_file(&dir.join(METRICS_FILE), cfg.n_batches() * cfg.batch_size() as u64)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Directories under `root` (inclusive) that contain a metrics file.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join(METRICS_FILE).is_file() {
            out.push(d.clone());
        }
        for e in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() && p.file_name().is_some_and(|n| n != CHECKPOINT_DIR) {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
