//! Run configuration: one JSON document, every leaf overridable by a dotted
//! key such as `lp.l2_strength` or `ood_prior.mc_samples`.
//!
//! `lp.seed` and `ood_prior.seed` default to the top-level `seed` when they
//! are not given explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::{default_epsilon_grid, validate_grid, OodPriorConfig};
use crate::error::{Error, Result};
use crate::linear_probe::LpTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub embeddings: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub model_dir: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            embeddings: None,
            manifest: None,
            model_dir: PathBuf::from("models"),
            out: PathBuf::from("report"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub lp: LpTrainConfig,
    pub ood_prior: OodPriorConfig,
    pub epsilon_grid: Vec<f64>,
    /// Rejection levels reported by `evaluate`, `decide` and `report`.
    pub eval_epsilons: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            lp: LpTrainConfig::default(),
            ood_prior: OodPriorConfig::default(),
            epsilon_grid: default_epsilon_grid(),
            eval_epsilons: vec![0.01, 0.05, 0.10],
            seed: 0,
        }
    }
}

/// Parses an override value: JSON if it parses, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("{key}: {} is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Builds a config from an optional JSON document plus `key=value`
    /// overrides applied in order.
    pub fn from_json_with_overrides(
        doc: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut tree: Value = match doc {
            Some(text) => serde_json::from_str(text)?,
            None => Value::Object(Default::default()),
        };
        if !tree.is_object() {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        for (key, raw) in overrides {
            if !Self::is_known_key(key) {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
            set_dotted(&mut tree, key, parse_value(raw))?;
        }
        let seed = tree.get("seed").cloned().unwrap_or(Value::from(0u64));
        for section in ["lp", "ood_prior"] {
            let entry = tree
                .as_object_mut()
                .unwrap()
                .entry(section)
                .or_insert_with(|| Value::Object(Default::default()));
            if let Some(obj) = entry.as_object_mut() {
                obj.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        let config: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_json_with_overrides(text.as_deref(), overrides)
    }

    /// Whether `key` names a leaf of the configuration tree.
    pub fn is_known_key(key: &str) -> bool {
        let tree = serde_json::to_value(RunConfig::default()).unwrap();
        let mut node = &tree;
        for part in key.split('.') {
            match node.get(part) {
                Some(n) => node = n,
                None => return false,
            }
        }
        !node.is_object()
    }

    pub fn validate(&self) -> Result<()> {
        self.lp.validate()?;
        self.ood_prior.validate()?;
        validate_grid(&self.epsilon_grid)?;
        if self.eval_epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::InvalidConfig(
                "eval_epsilons must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
