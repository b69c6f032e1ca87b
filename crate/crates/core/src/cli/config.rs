use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::DataConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::BoNetConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    /// Full-size network on 500x500 inputs.
    #[default]
    Full,
    /// `BoNetConfig::mini()`.
    Mini,
}

impl ModelPreset {
    pub fn config(self) -> BoNetConfig {
        match self {
            ModelPreset::Full => BoNetConfig::default(),
            ModelPreset::Mini => BoNetConfig::mini(),
        }
    }
}

/// Everything a run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base for the `model` section, whose keys override it.
    pub model_preset: ModelPreset,
    pub data: DataConfig,
    pub model: BoNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Overrides `train.seed` when set; also seeds parameter initialization.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_preset: ModelPreset::Full,
            data: DataConfig::default(),
            model: BoNetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: None,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Build from a JSON document plus `key.path=value` overrides; values
    /// are parsed as JSON and fall back to plain strings.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<RunConfig> {
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut doc, k.trim(), v)?;
        }
        let preset: ModelPreset = match doc.get("model_preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("model_preset: {e}")))?,
            None => ModelPreset::default(),
        };
        let mut model = serde_json::to_value(preset.config()).expect("config serializes");
        if let Some(m) = doc.get("model") {
            merge(&mut model, m.clone());
        }
        doc["model"] = model;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.effective_seed(),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_value(json!({}), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn preset_then_section_then_flags() {
        let doc = json!({"model_preset": "mini", "model": {"input_size": 32}, "train": {"epochs": 3}});
        let cfg = RunConfig::from_value(doc, &["train.epochs=7".into(), "seed=5".into()]).unwrap();
        assert_eq!(cfg.model.input_size, 32);
        assert_eq!(cfg.model.head_dims, BoNetConfig::mini().head_dims);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.effective_train().seed, 5);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_value(json!({"train": {"epochz": 3}}), &[]).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = RunConfig::from_value(json!({"extra": 1}), &[]).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
        let err = RunConfig::from_value(json!({"model": {"widthh": 1}}), &[]).unwrap_err().to_string();
        assert!(err.contains("widthh"), "{err}");
    }
}
