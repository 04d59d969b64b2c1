//! JSON config files merged with command-line overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub type ConfigMap = Map<String, Value>;

/// Reads a JSON object from `path`, or an empty object when no path is given.
pub fn load(path: Option<&Path>) -> Result<ConfigMap, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::config(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(CliError::config(format!("config {}: {e}", path.display()))),
    }
}

/// Sets `key` when the flag was given; flags win over file values.
pub fn set<T: Serialize>(map: &mut ConfigMap, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

/// Deserializes a typed config and rejects top-level keys it does not use.
pub fn parse<T: DeserializeOwned + Serialize>(map: &ConfigMap) -> Result<T, CliError> {
    let typed: T = serde_json::from_value(Value::Object(map.clone()))
        .map_err(|e| CliError::config(format!("config: {e}")))?;
    if let Value::Object(known) = serde_json::to_value(&typed).map_err(|e| CliError::config(e.to_string()))? {
        let known: BTreeSet<&String> = known.keys().collect();
        let unknown: Vec<&str> = map
            .keys()
            .filter(|k| !known.contains(k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
    }
    Ok(typed)
}

/// Full config as written to the manifest.
pub fn to_map<T: Serialize>(typed: &T) -> ConfigMap {
    match serde_json::to_value(typed) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}
