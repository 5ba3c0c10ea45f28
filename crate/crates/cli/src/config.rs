//! Run configuration: TOML file, then `--set` overrides, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use avwatch_core::featureio::SynthConfig;
use avwatch_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest; when unset, the synthetic generator supplies both splits.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Keep every `stride`-th frame.
    pub stride: usize,
    /// Longer videos are uniformly subsampled to this many frames.
    pub max_len: usize,
    /// Class names, index 0 normal. Defaults to `synth.classes`.
    pub classes: Option<Vec<String>>,
    /// Class-text embedding file (AVFE, C rows); random orthonormal rows when unset.
    pub class_embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            stride: 1,
            max_len: 256,
            classes: None,
            class_embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream (data, init, shuffle).
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn classes(&self) -> &[String] {
        self.data.classes.as_deref().unwrap_or(&self.synth.classes)
    }
}

const PATH_KEYS: [(&str, &str); 4] = [
    ("data", "train_manifest"),
    ("data", "test_manifest"),
    ("data", "class_embeddings"),
    ("train", "teacher_checkpoint"),
];

/// Relative paths in a config file are taken relative to the file; paths
/// from `--set` stay relative to the working directory.
fn rebase_paths(table: &mut Table, dir: &Path) {
    for (section, key) in PATH_KEYS {
        let slot = table
            .get_mut(section)
            .and_then(Value::as_table_mut)
            .and_then(|t| t.get_mut(key));
        if let Some(Value::String(p)) = slot {
            if Path::new(p.as_str()).is_relative() {
                *p = dir.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
}

/// Merge `file`, then each `key=value` override, into a validated config.
pub fn resolve(file: Option<&Path>, overrides: &[String], deterministic: bool) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let mut t = text
                .parse::<Table>()
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            if let Some(dir) = path.parent() {
                rebase_paths(&mut t, dir);
            }
            t
        }
        None => Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set {item}: expected key=value")))?;
        set_key(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    check_keys("", &table)?;
    let source = file.map_or_else(|| "--set".to_string(), |p| p.display().to_string());
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("{source}: {}", e.message())))?;

    if deterministic {
        cfg.train.deterministic = true;
    }
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.synth.validate()?;
    cfg.train.validate()?;
    if cfg.data.stride == 0 || cfg.data.max_len == 0 {
        return Err(CliError::config("data.stride and data.max_len must be positive"));
    }
    if cfg.classes().len() < 2 {
        return Err(CliError::config("at least two classes are required (normal plus one anomaly)"));
    }
    Ok(())
}

fn known_keys() -> Vec<String> {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.into_iter().map(|(k, _)| k).collect()
}

/// Reject keys the configuration does not define, naming the full dotted key.
fn check_keys(prefix: &str, table: &Table) -> Result<(), CliError> {
    let known = known_keys();
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let section = format!("{key}.");
        let is_section = known.iter().any(|n| n.starts_with(&section));
        match v {
            Value::Table(t) if is_section => check_keys(&key, t)?,
            _ if known.contains(&key) => {}
            _ if is_section => {
                return Err(CliError::config(format!("config key `{key}` is a section, not a value")))
            }
            _ => return Err(CliError::config(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return Err(CliError::config(format!("--set: empty key in {key:?}")));
    };
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: {part} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Every configuration key with its default, one per line.
pub fn keys_help() -> String {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (TOML sections; precedence: defaults < --config file < --set < flags):\n",
    );
    for (k, v) in lines {
        out.push_str(&format!("  {k:width$}  {v}\n"));
    }
    out.push_str("\nLog verbosity follows AVWATCH_LOG (error, warn, info, debug; default info).\n");
    out
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        serde_json::Value::Null => out.push((prefix.to_string(), unset_meaning(prefix).into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn unset_meaning(key: &str) -> &'static str {
    match key {
        "data.train_manifest" | "data.test_manifest" => "unset: synthetic splits from [synth]",
        "data.classes" => "unset: synth.classes",
        "data.class_embeddings" => "unset: random orthonormal rows from the seed",
        "train.teacher_checkpoint" => "unset (distill needs it or --teacher)",
        "train.model.ffn_hidden" => "unset: d",
        "train.model.res_hidden" => "unset: d/2",
        "train.model.cls_hidden" | "train.model.uncert_hidden" | "train.model.attn_dim" => "unset: d/4",
        _ => "unset",
    }
}
