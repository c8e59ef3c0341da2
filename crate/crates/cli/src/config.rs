//! Run configuration: JSON file merged with `--section.key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use prefix_bridge::generate::DecodeConfig;
use prefix_bridge::lm::LmConfig;
use prefix_bridge::mapper::MapperConfig;
use prefix_bridge::trainer::TrainConfig;
use prefix_bridge::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub k: usize,
    /// 0 means "use mapper.clip_dim".
    pub clip_dim: usize,
    pub noise_sigma: f32,
    pub max_findings: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            k: 8,
            clip_dim: 0,
            noise_sigma: 0.05,
            max_findings: 3,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lm: LmConfig,
    pub mapper: MapperConfig,
    pub train: TrainConfig,
    pub synth: SynthSection,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn effective_clip_dim(&self) -> usize {
        if self.synth.clip_dim > 0 {
            self.synth.clip_dim
        } else {
            self.mapper.clip_dim
        }
    }
}

/// Split argv into clap args and `--section.key=value` overrides. Only
/// dotted keys are treated as overrides so ordinary flags pass through.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let body = arg.strip_prefix("--");
        match body.and_then(|b| b.split_once('=')) {
            Some((key, value)) if key.contains('.') => {
                overrides.push((key.to_string(), value.to_string()));
            }
            _ => plain.push(arg),
        }
    }
    (plain, overrides)
}

fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key}")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override key {key} crosses a non-object")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts.last().unwrap().to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override key {key} crosses a non-object"))),
    }
}

/// Config file (optional) with overrides applied before deserialization, so
/// unknown keys are rejected with the offending name.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::json!({}),
    };
    if !root.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for (key, value) in overrides {
        apply_override(&mut root, key, value)?;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("config: {e}")))
}
