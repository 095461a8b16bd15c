//! The run configuration file and dotted-path overrides.
//!
//! Loading starts from the serialized defaults, merges the file on top and
//! then applies `key.path=value` overrides. Keys absent from the defaults
//! are rejected at every stage, so a typo never silently does nothing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{AblationAxis, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LOGO_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Share of the training segment kept by the few-shot protocol.
    pub few_shot_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            few_shot_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    /// Values to sweep; empty means the axis's standard set.
    pub values: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: AblationAxis::FreezePolicy,
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Index of the test window to probe.
    pub window: usize,
    pub channel: usize,
}

#[allow(clippy::derivable_impls)]
impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            window: 0,
            channel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub run_name: String,
    /// Empty means `$LOGO_OUT_DIR`, falling back to `out`.
    pub root: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            root: String::new(),
        }
    }
}

impl OutputConfig {
    pub fn run_dir(&self) -> PathBuf {
        let root = if self.root.is_empty() {
            std::env::var(OUTPUT_ROOT_ENV).unwrap_or_else(|_| "out".into())
        } else {
            self.root.clone()
        };
        Path::new(&root).join(&self.run_name)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetManifest,
    /// Evaluation dataset for the zero-shot protocol.
    pub target: DatasetManifest,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub ablation: AblationConfig,
    pub probe: ProbeConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mut m = self.model.clone();
        for &h in &self.train.horizons {
            m.horizon = h;
            m.validate()?;
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table =
            Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "config file {} not found",
                    path.display()
                )));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, user, "")?;
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = coerce(slot, v),
        }
    }
    Ok(())
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
    }
    let slot = cur
        .get_mut(*last)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    if slot.is_table() {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *slot = coerce(slot, parse_value(raw.trim()));
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Nudges a value toward the type already in `slot` where that is lossless.
fn coerce(slot: &Value, v: Value) -> Value {
    match (slot, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::String(_), Value::Integer(i)) => Value::String(i.to_string()),
        (Value::String(_), Value::Float(f)) => Value::String(f.to_string()),
        (Value::String(_), Value::Boolean(b)) => Value::String(b.to_string()),
        (_, v) => v,
    }
}
