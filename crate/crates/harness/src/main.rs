use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ppo_dynamics::diagnostics::{capacity_loss, CapacityHead};
use ppo_dynamics::networks::load_checkpoint;
use ppo_dynamics::ppo::{run_capacity_probe, run_normalizer};
use ppo_dynamics::rng::RngStreams;
use ppo_dynamics::toy::{toy_simulate, toy_verify_claims, write_trace_csv, ToyConfig};
use ppo_dynamics_cli::config::{parse_override, set_path, RunConfig};
use ppo_dynamics_cli::run::{find_run_dirs, resummarize, run_experiment};
use ppo_dynamics_cli::summary::write_json;
use ppo_dynamics_cli::correlate_runs;

#[derive(Parser)]
#[command(name = "ppo-dynamics", version, about = "PPO training and representation diagnostics on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>> {
        Ok(self.overrides.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?)
    }

    fn run_config(&self) -> Result<RunConfig> {
        let ov = self.overrides()?;
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, &ov)?,
            None => RunConfig::from_toml_str("", &ov)?,
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured variant and seed.
    Train(Common),
    /// Simulate the two-state toy model and write its trace as CSV.
    Toy(Common),
    /// Capacity loss of a saved checkpoint against a run's probe.
    Capacity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Correlate two metrics across run directories.
    Correlate {
        #[command(flatten)]
        common: Common,
        /// Dotted metric key, e.g. `actor.rank.srank`.
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Feature-layer width for the normalized distance.
        #[arg(long)]
        width: Option<usize>,
        /// EWMA coefficient applied to both series first.
        #[arg(long)]
        smooth: Option<f64>,
        /// Run directories, or experiment directories to search.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Recompute `summary.json` for run directories.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => train(&c),
        Command::Toy(c) => toy(&c),
        Command::Capacity { common, checkpoint } => capacity(&common, &checkpoint),
        Command::Correlate {
            common,
            x,
            y,
            width,
            smooth,
            dirs,
        } => correlate(&common, &x, &y, width, smooth, &dirs),
        Command::Summarize { dirs } => summarize(&dirs),
    }
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let results = run_experiment(&cfg)?;
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(n) => println!("ok     {} seed {} ({n} records) -> {}", r.entry.variant, r.entry.seed, r.entry.dir.display()),
            Err(e) => {
                failed += 1;
                println!("failed {} seed {}: {e}", r.entry.variant, r.entry.seed);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} runs failed", results.len());
    }
    Ok(())
}

fn toy(c: &Common) -> Result<()> {
    let mut table = match &c.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => toml::Table::new(),
    };
    for (k, v) in c.overrides()? {
        set_path(&mut table, &k, v)?;
    }
    let mut base = toml::Table::try_from(ToyConfig::default())?;
    for (k, v) in table {
        if !base.contains_key(&k) {
            bail!("unknown toy config key `{k}`");
        }
        base.insert(k, v);
    }
    let cfg: ToyConfig = base.try_into()?;
    let trace = toy_simulate(&cfg)?;
    let claims = toy_verify_claims(&trace, &cfg);
    match &c.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let csv = dir.join("toy_trace.csv");
            write_trace_csv(&trace, std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
            write_json(&dir.join("toy_claims.json"), &claims)?;
            println!("{}", serde_json::to_string_pretty(&claims)?);
            println!("trace written to {}", csv.display());
        }
        None => write_trace_csv(&trace, std::io::stdout().lock())?,
    }
    Ok(())
}

fn capacity(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = c.run_config()?;
    let mut train = cfg.train.clone();
    train.seed = cfg.seeds[0];
    let streams = RngStreams::new(train.seed);
    let normalizer = run_normalizer(&train, &streams)?;
    let probe = run_capacity_probe(&train, &streams, normalizer.as_ref())?;
    let agent = load_checkpoint(checkpoint)?;
    let report = serde_json::json!({
        "checkpoint": checkpoint,
        "seed": train.seed,
        "actor": capacity_loss(&agent, &probe, CapacityHead::Actor)?,
        "critic": capacity_loss(&agent, &probe, CapacityHead::Critic)?,
    });
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("capacity.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn expand(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        out.extend(find_run_dirs(d)?);
    }
    if out.is_empty() {
        bail!("no metrics files found");
    }
    Ok(out)
}

fn correlate(c: &Common, x: &str, y: &str, width: Option<usize>, smooth: Option<f64>, dirs: &[PathBuf]) -> Result<()> {
    let runs = expand(dirs)?;
    let refs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
    let summary = correlate_runs(&refs, x, y, width, smooth)?;
    let report = serde_json::json!({ "x": x, "y": y, "runs": runs, "correlation": summary });
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("correlation.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn summarize(dirs: &[PathBuf]) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("{:<60} {:>10} {:>10} {:>10}", "run", "return", "preact", "excess");
    for dir in expand(dirs)? {
        let s = resummarize(&dir)?;
        let tail = |k: &str| s.tail.get(k).copied().flatten();
        println!(
            "{:<60} {:>10} {:>10} {:>10}",
            dir.display(),
            fmt(tail("episode_return_mean")),
            fmt(tail("actor.preactivation_norm")),
            fmt(s.excess_ratio_last_nontrivial),
        );
    }
    Ok(())
}
