//! Flat `section.key = value` configuration files.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::assign::MatcherConfig;
use crate::detector::DetectorConfig;
use crate::dota::{self, PatchConfig};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::synth::SceneSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("key `{0}` conflicts with a section of the same name")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// `key = value` pairs in file order. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("malformed key `{}`", k.trim()),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(ConfigError::Duplicate(key));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Nests dotted keys into a JSON object.
pub fn pairs_to_value(pairs: &[(String, String)]) -> Result<Value, ConfigError> {
    let mut root = Map::new();
    for (key, text) in pairs {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry.as_object_mut().ok_or_else(|| ConfigError::Shape(key.clone()))?;
        }
        let leaf = parts[parts.len() - 1];
        if node.contains_key(leaf) {
            return Err(ConfigError::Shape(key.clone()));
        }
        node.insert(leaf.to_string(), scalar(text));
    }
    Ok(Value::Object(root))
}

/// Inverse of [`pairs_to_value`]: dotted keys in sorted order.
pub fn value_to_pairs(value: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let value = pairs_to_value(&parse_pairs(text)?)?;
    serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))
}

pub fn to_text<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config types serialise");
    render_pairs(&value_to_pairs(&value))
}

/// Output settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    /// Training images for the smoke and ablation pipelines.
    pub train_images: usize,
    pub test_images: usize,
    /// Seeds per ablation arm.
    pub ablation_seeds: usize,
    /// Path to an existing dataset directory; empty means generate one.
    pub dataset: String,
    pub checkpoint: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            train_images: 16,
            test_images: 8,
            ablation_seeds: 3,
            dataset: String::new(),
            checkpoint: String::new(),
        }
    }
}

/// Everything a command can be configured with. Every field has a default,
/// so an empty file is a valid configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub detector: DetectorConfig,
    pub scene: SceneSpec,
    pub matcher: MatcherConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub patch: PatchConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = from_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.matcher.validate().map_err(|e| bad(&e))?;
        self.loss.validate().map_err(|e| bad(&e))?;
        self.eval.validate().map_err(|e| bad(&e))?;
        dota::plan_patches(self.patch.patch_size, self.patch.patch_size, &self.patch).map_err(|e| bad(&e))?;
        self.scene.validate().map_err(|e| bad(&e))?;
        self.detector.validate().map_err(|e| bad(&e))?;
        if self.scene.image_size != self.detector.input_size {
            return Err(ConfigError::Invalid(format!(
                "scene.image_size {} differs from detector.input_size {}",
                self.scene.image_size, self.detector.input_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_text("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_override_fields() {
        let cfg = RunConfig::from_text("run.seed = 7\nloss.lambda = 2.5\nmatcher.anchor_ratios = [1.0]\nrun.out_dir = results/a\n").unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.loss.lambda, 2.5);
        assert_eq!(cfg.matcher.anchor_ratios, vec![1.0]);
        assert_eq!(cfg.run.out_dir, "results/a");
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(matches!(RunConfig::from_text("loss.lamda = 1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_text("run.seed 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("run.seed = 1\nrun.seed = 2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::from_text("run = 1\nrun.seed = 2"), Err(ConfigError::Shape(_))));
        assert!(matches!(RunConfig::from_text("loss.lambda = -1"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 99;
        cfg.detector.width = 12;
        cfg.loss.focal_gamma = 1.5;
        let text = to_text(&cfg);
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        assert_eq!(to_text(&RunConfig::from_text(&text).unwrap()), text);
    }
}
