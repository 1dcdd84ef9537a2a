//! Run configuration: one TOML file with `[run]`, `[world]`, `[train]`,
//! `[detect]` and `[eval]` sections, plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::world::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Pseudo-unknown offset applied at training and inference.
    pub alpha: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, alpha: 0.4 }
    }
}

/// Optional acceptance thresholds checked by `eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalThresholds {
    pub min_u_recall: Option<f64>,
    pub min_map_both: Option<f64>,
    pub max_a_ose: Option<u64>,
    pub max_wi: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub world: WorldSpec,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalThresholds,
}

fn parse_value(raw: &str) -> toml::Value {
    // `x = <raw>` parses numbers, booleans, arrays and quoted strings;
    // anything else is taken as a bare string
    toml::from_str::<toml::Table>(&format!("x = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if !(0.0..=2.0).contains(&self.run.alpha) {
            return Err(Error::Config("run.alpha must lie in [0, 2]".into()));
        }
        let d = &self.detect;
        if d.logit_scale.is_nan()
            || d.logit_scale <= 0.0
            || !(0.0..=1.0).contains(&d.conf_threshold)
            || !(0.0..=1.0).contains(&d.nms_iou)
        {
            return Err(Error::Config("detect thresholds out of range".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
