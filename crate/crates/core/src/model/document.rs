//! Structured-text (JSON) config documents with dotted-path overrides.
//!
//! A document carries the `ModelConfig` fields at top level, an optional
//! `"preset"` name that supplies defaults for any field not given, and an
//! optional `"grid"` section consumed by the ablation runner.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

use super::config::{variant_preset, ModelConfig};

pub const PRESET_KEY: &str = "preset";
pub const GRID_KEY: &str = "grid";

/// A parsed and validated document.
#[derive(Debug, Clone)]
pub struct ResolvedDocument {
    pub model: ModelConfig,
    pub grid: Option<Value>,
}

/// Parses a `KEY=VALUE` override. The value is read as JSON when it parses
/// as JSON, otherwise as a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {raw:?} has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `path` (e.g. `stages.2.attention_tail`) inside `doc`. Missing object
/// keys are created; array indices must exist.
pub fn apply_override(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override path {path:?}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("override path {path:?}: index {idx} out of range (length {len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::Config(format!(
                    "override path {path:?}: {part:?} does not address an object or array"
                )))
            }
        };
    }
    Ok(())
}

fn expand_preset(doc: Value) -> Result<Value> {
    let Value::Object(mut map) = doc else {
        return Err(Error::Config("config document must be a JSON object".into()));
    };
    let Some(preset) = map.remove(PRESET_KEY) else {
        return Ok(Value::Object(map));
    };
    let name = preset
        .as_str()
        .ok_or_else(|| Error::Config("\"preset\" must be a string".into()))?;
    let Value::Object(mut base) = serde_json::to_value(variant_preset(name)?)? else {
        unreachable!("configs serialize to objects")
    };
    for (k, v) in map {
        base.insert(k, v);
    }
    Ok(Value::Object(base))
}

/// Applies overrides, expands any preset, strips the grid section, and
/// returns the validated model config.
pub fn resolve_document(doc: Value, overrides: &[(String, Value)]) -> Result<ResolvedDocument> {
    let mut doc = doc;
    if !doc.is_object() {
        return Err(Error::Config("config document must be a JSON object".into()));
    }
    // the preset is expanded before other overrides so they land on top of it
    for (k, v) in overrides.iter().filter(|(k, _)| k == PRESET_KEY) {
        apply_override(&mut doc, k, v.clone())?;
    }
    let mut doc = expand_preset(doc)?;
    for (k, v) in overrides.iter().filter(|(k, _)| k != PRESET_KEY) {
        apply_override(&mut doc, k, v.clone())?;
    }
    let grid = doc.as_object_mut().and_then(|m| m.remove(GRID_KEY));
    let model: ModelConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("config document: {e}")))?;
    Ok(ResolvedDocument {
        model: model.validated()?,
        grid,
    })
}

/// Parses document text, then [`resolve_document`].
pub fn load_document(text: &str, overrides: &[(String, Value)]) -> Result<ResolvedDocument> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config document: {e}")))?;
    resolve_document(doc, overrides)
}
