//! Run configuration: one versioned JSON document plus command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use step_core::data::{AffineRanges, DEFAULT_SYNTH_FRAMES};
use step_core::loss::LossConfig;
use step_core::metrics::MetricConfig;
use step_core::network::ModelConfig;
use step_core::tracker::UpdatePolicy;
use step_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_frames: usize,
    /// Clips generated from each source image.
    pub per_image: usize,
    pub ranges: AffineRanges,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_frames: DEFAULT_SYNTH_FRAMES, per_image: 1, ranges: AffineRanges::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tracker: UpdatePolicy,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            tracker: UpdatePolicy::default(),
            synth: SynthConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let usage = |m: &str| Error::Usage(format!("invalid config: {m}"));
        if self.config_version != CONFIG_VERSION {
            return Err(usage(&format!("config_version must be {CONFIG_VERSION}, got {}", self.config_version)));
        }
        self.model.validate().map_err(usage)?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.metrics.validate().map_err(|e| usage(&e.to_string()))?;
        let w = &self.loss.weights;
        if [w.cls_box, w.giou, w.cls_kp, w.hom, w.gmsp].iter().any(|&l| !(l >= 0.0)) || !(self.loss.hom_radius >= 0.0) {
            return Err(usage("loss weights and hom_radius must be non-negative"));
        }
        if self.synth.n_frames < 2 || self.synth.per_image == 0 {
            return Err(usage("synth needs n_frames ≥ 2 and per_image ≥ 1"));
        }
        Ok(())
    }

    /// Reads `path` (or the defaults), applies `key.path=value` overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value`; the value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("override {key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Usage(format!("override {assignment:?} has an empty key")))
}

/// Every configuration key with its default, one `key = value` line each.
pub fn describe_keys() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push(format!("  {prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("default config serializes"), &mut lines);
    format!("Config keys (set in --config JSON or with --set key=value):\n{}", lines.join("\n"))
}

/// Writes the effective configuration beside an artifact as `<artifact>.config.json`.
pub fn write_echo(artifact: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    let path = artifact.with_file_name(name);
    std::fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))
}
