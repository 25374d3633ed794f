//! Run configuration: one JSON document with `data`, `model`, `train`,
//! `cache` and `serve` sections. Command-line overrides are applied to the
//! JSON before it is parsed, so every error names the offending path.

use std::fmt;
use std::path::{Path, PathBuf};

use hccm::data::SyntheticConfig;
use hccm::model::ModelConfig;
use hccm::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Invalid configuration; reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config at `{}`: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(path: impl Into<String>, message: impl fmt::Display) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// Feature-map cache file; when absent the maps are computed in memory.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub http_port: Option<u16>,
    pub replay: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            http_port: None,
            replay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cache: CacheConfig,
    pub serve: ServeConfig,
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "cache", "serve"];

/// Parses `key.path=value`; the value is JSON when it parses, else a string.
fn apply_set(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like section.field=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(key, "cannot descend into a non-object value"))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(config_err(key, "empty override key"))
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Deserializes one section over its defaults, reporting errors with the
/// full JSON path.
fn section<T: Serialize + DeserializeOwned>(name: &str, defaults: T, patch: Option<&Value>) -> Result<T, ConfigError> {
    let mut value = serde_json::to_value(defaults).expect("defaults serialize");
    if let Some(p) = patch {
        if !p.is_object() {
            return Err(config_err(name, "section must be a JSON object"));
        }
        merge(&mut value, p.clone());
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { name.to_string() } else { format!("{name}.{inner}") };
        config_err(path, e.inner())
    })
}

impl RunConfig {
    /// Reads the optional config file, applies overrides and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e))?;
                let mut de = serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize::<_, Value>(&mut de)
                    .map_err(|e| config_err(e.path().to_string(), e.inner()))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_set(&mut doc, o)?;
        }
        let obj = doc.as_object().ok_or_else(|| config_err(".", "config must be a JSON object"))?;
        if let Some(unknown) = obj.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(config_err(
                unknown.clone(),
                format!("unknown section, expected one of {}", SECTIONS.join(", ")),
            ));
        }
        let data: SyntheticConfig = section("data", SyntheticConfig::default(), obj.get("data"))?;
        // Model extents follow the data section unless set explicitly.
        let model: ModelConfig = section("model", ModelConfig::matching(&data), obj.get("model"))?;
        let train: TrainConfig = section("train", TrainConfig::default(), obj.get("train"))?;
        let cache: CacheConfig = section("cache", CacheConfig::default(), obj.get("cache"))?;
        let serve: ServeConfig = section("serve", ServeConfig::default(), obj.get("serve"))?;
        let cfg = RunConfig {
            data,
            model,
            train,
            cache,
            serve,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| config_err("data", e))?;
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.train.validate().map_err(|e| config_err("train", e))?;
        if self.model.image_extents() != self.data.extents() {
            return Err(config_err("model", "image extents differ from the data section"));
        }
        if self.model.num_categories < self.data.num_categories {
            return Err(config_err("model.num_categories", "fewer categories than the data generates"));
        }
        if self.model.context_fields != self.data.context_fields {
            return Err(config_err("model.context_fields", "differs from data.context_fields"));
        }
        Ok(())
    }
}
