//! Experiment configuration files.
//!
//! A config is a TOML document. The top level holds the training settings
//! (`env`, `network`, `ppo`, `diagnostics`, `total_steps`, …) next to the
//! harness keys `name`, `seeds`, `output_dir`, `save_checkpoints` and an
//! optional `[sweep]` table. Missing training settings take the defaults of
//! the configured `env.kind`; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ppo_dynamics::envs::EnvKind;
use ppo_dynamics::ppo::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid override `{0}`, expected key=value")]
    Override(String),
    #[error(transparent)]
    Invalid(#[from] ppo_dynamics::Error),
}

type Result<T> = std::result::Result<T, ConfigError>;

fn value_err(key: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

/// One resolved experiment: a training config shared by every run, the
/// seeds to run it with and the grid of variants to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
    /// Dotted training key → values; variants are the cartesian product.
    pub sweep: BTreeMap<String, Vec<Value>>,
    /// Base training settings. `train.seed` is replaced per run.
    pub train: TrainConfig,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// `key=value` pairs joined with `+`, or `base` without a sweep.
    pub label: String,
    pub overrides: BTreeMap<String, Value>,
    pub train: TrainConfig,
}

/// Parses `text` as a TOML value, falling back to a bare string.
pub fn parse_value(text: &str) -> Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Splits `key=value` into a dotted path and a TOML value.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    Ok((k.to_string(), parse_value(v.trim())))
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| value_err(path, format!("`{part}` is not a table")))?;
    }
    Err(ConfigError::Override(path.to_string()))
}

/// Recursively overlays `user` onto `base`, rejecting keys `base` lacks.
fn merge_checked(base: &mut Table, user: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(path)),
            (Some(Value::Table(b)), Value::Table(u)) => merge_checked(b, u, &path)?,
            (Some(Value::Table(_)), _) => return Err(value_err(&path, "expected a table")),
            (Some(slot), _) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn env_kind(table: &Table) -> Result<EnvKind> {
    match table.get("env").and_then(|e| e.get("kind")) {
        None => Ok(EnvKind::ChainDense),
        Some(v) => v.clone().try_into().map_err(|e| value_err("env.kind", e)),
    }
}

fn defaults_table(kind: EnvKind) -> Result<Table> {
    let mut t = Table::try_from(TrainConfig::defaults(kind)).map_err(|e| value_err("defaults", e))?;
    t.remove("seed");
    Ok(t)
}

/// Resolves a training table (no harness keys) over the defaults of its
/// environment kind.
pub fn resolve_train(user: &Table) -> Result<TrainConfig> {
    if user.contains_key("seed") {
        return Err(value_err("seed", "set run seeds with `seeds = [...]`"));
    }
    let mut merged = defaults_table(env_kind(user)?)?;
    merge_checked(&mut merged, user, "")?;
    merged.insert("seed".into(), Value::Integer(0));
    let cfg: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| value_err("config", e.message()))?;
    Ok(cfg)
}

fn flatten_sweep(table: &Table, prefix: &str, out: &mut BTreeMap<String, Vec<Value>>) -> Result<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten_sweep(t, &path, out)?,
            Value::Array(a) if !a.is_empty() => {
                out.insert(path, a.clone());
            }
            _ => return Err(value_err(&format!("sweep.{path}"), "expected a non-empty list")),
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses a whole config document, applying `overrides` first.
    pub fn from_toml_str(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table: Table = toml::from_str(text)?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Self::from_table(table)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        let mut take = |k: &str| table.remove(k);
        let name = match take("name") {
            None => "experiment".to_string(),
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(_) => return Err(value_err("name", "expected a non-empty string")),
        };
        let seeds = match take("seeds") {
            None => vec![0],
            Some(v) => {
                let seeds: Vec<u64> = v.try_into().map_err(|e: toml::de::Error| value_err("seeds", e.message()))?;
                if seeds.is_empty() {
                    return Err(value_err("seeds", "expected at least one seed"));
                }
                seeds
            }
        };
        let output_dir = match take("output_dir") {
            None => PathBuf::from("runs"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(_) => return Err(value_err("output_dir", "expected a path string")),
        };
        let save_checkpoints = match take("save_checkpoints") {
            None => true,
            Some(Value::Boolean(b)) => b,
            Some(_) => return Err(value_err("save_checkpoints", "expected a boolean")),
        };
        let mut sweep = BTreeMap::new();
        match take("sweep") {
            None => {}
            Some(Value::Table(t)) => flatten_sweep(&t, "", &mut sweep)?,
            Some(_) => return Err(value_err("sweep", "expected a table")),
        }
        let train = resolve_train(&table)?;
        let cfg = Self {
            name,
            seeds,
            output_dir,
            save_checkpoints,
            sweep,
            train,
        };
        cfg.variants()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    /// The base training settings as a table, without `seed`.
    pub fn train_table(&self) -> Result<Table> {
        let mut t = Table::try_from(&self.train).map_err(|e| value_err("config", e))?;
        t.remove("seed");
        Ok(t)
    }

    /// The fully resolved config; parsing it back gives `self`.
    pub fn to_table(&self) -> Result<Table> {
        let mut t = self.train_table()?;
        t.insert("name".into(), Value::String(self.name.clone()));
        let seeds = self
            .seeds
            .iter()
            .map(|&s| i64::try_from(s).map(Value::Integer).map_err(|_| value_err("seeds", "seed exceeds i64")))
            .collect::<Result<Vec<_>>>()?;
        t.insert("seeds".into(), Value::Array(seeds));
        t.insert("output_dir".into(), Value::String(self.output_dir.to_string_lossy().into_owned()));
        t.insert("save_checkpoints".into(), Value::Boolean(self.save_checkpoints));
        if !self.sweep.is_empty() {
            let mut sw = Table::new();
            for (k, v) in &self.sweep {
                sw.insert(k.clone(), Value::Array(v.clone()));
            }
            t.insert("sweep".into(), Value::Table(sw));
        }
        Ok(t)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&self.to_table()?).map_err(|e| value_err("config", e))
    }

    /// Every point of the sweep grid, in lexicographic key order with the
    /// last key varying fastest.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.sweep.is_empty() {
            self.train.validate()?;
            return Ok(vec![Variant {
                label: "base".into(),
                overrides: BTreeMap::new(),
                train: self.train.clone(),
            }]);
        }
        let base = self.train_table()?;
        let keys: Vec<&String> = self.sweep.keys().collect();
        let mut combos: Vec<Vec<&Value>> = vec![vec![]];
        for k in &keys {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    self.sweep[*k].iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|combo| {
                let mut table = base.clone();
                let mut overrides = BTreeMap::new();
                let mut parts = Vec::new();
                for (k, v) in keys.iter().zip(combo) {
                    set_path(&mut table, k, v.clone())?;
                    overrides.insert((*k).clone(), v.clone());
                    parts.push(format!("{k}={}", label_value(v)));
                }
                let train = resolve_train(&table)?;
                train.validate().map_err(ConfigError::Invalid)?;
                Ok(Variant {
                    label: parts.join("+"),
                    overrides,
                    train,
                })
            })
            .collect()
    }
}

fn label_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(label_value).collect::<Vec<_>>().join("x"),
        other => other.to_string(),
    }
}
