//! Layered run configuration: defaults, then a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinkhorn_core::attention::Variant;
use sinkhorn_core::harness::charlm::CharLmSpec;
use sinkhorn_core::harness::sort_task::SortTaskSpec;
use sinkhorn_core::harness::sweep::SweepGrid;
use sinkhorn_core::harness::{ExperimentConfig, TaskKind, TrainSpec};
use sinkhorn_core::model::{AdamConfig, ModelSpec};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("override {key}: {msg}")]
    Override { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub temperature: Vec<f64>,
    pub n_iters: Vec<usize>,
    pub block_size: Vec<usize>,
    pub variant: Vec<Variant>,
    /// Cells trained concurrently.
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            temperature: Vec::new(),
            n_iters: Vec::new(),
            block_size: Vec::new(),
            variant: Vec::new(),
            workers: 1,
        }
    }
}

impl SweepSection {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            temperature: self.temperature.clone(),
            n_iters: self.n_iters.clone(),
            block_size: self.block_size.clone(),
            variant: self.variant.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountSection {
    pub seq_len: usize,
    /// Variants to report; empty means the configured one.
    pub variants: Vec<Variant>,
}

impl Default for AccountSection {
    fn default() -> Self {
        Self {
            seq_len: 1024,
            variants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Checkpoint to evaluate; `output_dir/model.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskKind,
    pub model: ModelSpec,
    pub sort: SortTaskSpec,
    pub charlm: CharLmSpec,
    pub train: TrainSpec,
    pub optimizer: AdamConfig,
    pub sweep: SweepSection,
    pub account: AccountSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: e.seed,
            output_dir: PathBuf::from("runs/default"),
            task: e.task,
            model: e.model,
            sort: e.sort,
            charlm: e.charlm,
            train: e.train,
            optimizer: e.optimizer,
            sweep: SweepSection::default(),
            account: AccountSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            task: self.task,
            model: self.model.clone(),
            sort: self.sort,
            charlm: self.charlm.clone(),
            train: self.train,
            optimizer: self.optimizer,
        }
    }

    pub fn to_text(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(format!("cannot serialize config: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(format!("invalid config: {e}")))
    }
}

/// Splits `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(ConfigError::Override { key: a.clone(), msg: "expected --key value".into() });
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| ConfigError::Override { key: flag.to_string(), msg: "missing value".into() })?;
            out.push((flag.to_string(), v.clone()));
        }
    }
    Ok(out)
}

/// A TOML literal, or the raw text as a string when it does not parse as one.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn lookup<'a>(t: &'a Table, path: &[String]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = t.get(first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

/// Every path below `t` whose last segment is `name`.
fn find_named(t: &Table, name: &str, prefix: &mut Vec<String>, hits: &mut Vec<Vec<String>>) {
    for (k, v) in t {
        prefix.push(k.clone());
        if k == name {
            hits.push(prefix.clone());
        }
        if let Some(sub) = v.as_table() {
            find_named(sub, name, prefix, hits);
        }
        prefix.pop();
    }
}

/// Full path for a dotted key. `model.block_size` resolves to
/// `model.attention.block_size` when that is the only `block_size` under `model`.
fn resolve_key(schema: &Table, key: &str) -> Result<Vec<String>, ConfigError> {
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::Override { key: key.into(), msg: "empty key segment".into() });
    }
    if lookup(schema, &path).is_some() {
        return Ok(path);
    }
    let (name, parent) = path.split_last().expect("non-empty");
    let scope = if parent.is_empty() {
        Some(schema)
    } else {
        lookup(schema, parent).and_then(Value::as_table)
    };
    if let Some(scope) = scope {
        let mut hits = Vec::new();
        find_named(scope, name, &mut parent.to_vec(), &mut hits);
        match hits.len() {
            1 => return Ok(hits.remove(0)),
            n if n > 1 => {
                let options: Vec<String> = hits.iter().map(|h| h.join(".")).collect();
                return Err(ConfigError::Override {
                    key: key.into(),
                    msg: format!("ambiguous, could be {}", options.join(" or ")),
                });
            }
            _ => {}
        }
    }
    // Optional fields are absent from the schema; deserialization rejects unknown ones.
    Ok(path)
}

fn set(t: &mut Table, path: &[String], value: Value, key: &str) -> Result<(), ConfigError> {
    let (first, rest) = path.split_first().expect("non-empty");
    if rest.is_empty() {
        t.insert(first.clone(), value);
        return Ok(());
    }
    let sub = t.entry(first.clone()).or_insert_with(|| Value::Table(Table::new()));
    let sub = sub.as_table_mut().ok_or_else(|| ConfigError::Override {
        key: key.into(),
        msg: format!("{first} is not a section"),
    })?;
    set(sub, rest, value, key)
}

/// Resolves defaults < `file` < `overrides`.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
            toml::from_str::<Table>(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let schema = Table::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (key, raw) in overrides {
        let path = resolve_key(&schema, key)?;
        set(&mut table, &path, parse_value(raw), key)?;
    }
    Value::Table(table)
        .try_into::<RunConfig>()
        .map_err(|e| ConfigError::Parse(format!("invalid config: {e}")))
}
