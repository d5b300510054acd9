//! Layered configuration: built-in defaults, then a TOML file section, then
//! command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parsed `--config` file; each command reads its own `[section]`s.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: toml::Value = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        match serde_json::to_value(value)? {
            Value::Object(root) => Ok(ConfigFile { root }),
            _ => bail!(ConfigError("config root must be a table".into())),
        }
    }

    pub fn section(&self, name: &str) -> Option<&Map<String, Value>> {
        self.root.get(name).and_then(Value::as_object)
    }
}

/// Marker for configuration errors so they map to their own exit category.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Flag overrides: only flags the user actually passed.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("serialisable flag"));
        }
        self
    }
}

fn overlay(base: &mut Map<String, Value>, layer: &Map<String, Value>, origin: &str) -> Result<()> {
    for (k, v) in layer {
        if !base.contains_key(k) {
            bail!(ConfigError(format!("unknown key `{k}` in {origin}")));
        }
        base.insert(k.clone(), v.clone());
    }
    Ok(())
}

/// Applies `file[section]` and then `flags` over `defaults`.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: T, file: &ConfigFile, section: &str, flags: &Flags) -> Result<T> {
    let Value::Object(mut base) = serde_json::to_value(defaults)? else {
        bail!("config defaults must be an object");
    };
    if let Some(s) = file.section(section) {
        overlay(&mut base, s, &format!("config section [{section}]"))?;
    }
    overlay(&mut base, &flags.0, "flags")?;
    serde_json::from_value(Value::Object(base)).map_err(|e| ConfigError(format!("[{section}]: {e}")).into())
}

/// Overrides on top of an arbitrary base, used for grid candidates.
pub fn with_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &Map<String, Value>, origin: &str) -> Result<T> {
    let Value::Object(mut obj) = serde_json::to_value(base)? else {
        bail!("base must be an object");
    };
    overlay(&mut obj, overrides, origin)?;
    serde_json::from_value(Value::Object(obj)).map_err(|e| ConfigError(format!("{origin}: {e}")).into())
}
