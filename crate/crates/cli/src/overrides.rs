//! JSON configuration files with `--set dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

/// Sets `path` (dot-separated, array indices allowed) in `root`. The value is
/// parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    if key.is_empty() {
        bail!("override {assignment:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("{key}: {part:?} is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| anyhow!("{key}: index {idx} out of range ({len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("{key}: cannot descend into a scalar at {part:?}"),
        };
    }
    Ok(())
}

/// Loads the JSON file (or an empty object) and applies every override.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Value> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    Ok(root)
}

/// Directory against which relative paths inside a config are resolved.
pub fn config_base(path: Option<&Path>) -> Option<PathBuf> {
    path.and_then(Path::parent).map(Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_and_typed() {
        let mut v = json!({"network": {"blocks": [{"n_branches": 3}]}, "lr": 0.1});
        apply_override(&mut v, "lr=0.05").unwrap();
        apply_override(&mut v, "network.blocks.0.n_branches=1").unwrap();
        apply_override(&mut v, "network.gate_activation=tanh").unwrap();
        apply_override(&mut v, "lr_decay_epochs=[10,20]").unwrap();
        assert_eq!(
            v,
            json!({"network": {"blocks": [{"n_branches": 1}], "gate_activation": "tanh"},
                   "lr": 0.05, "lr_decay_epochs": [10, 20]})
        );
    }

    #[test]
    fn rejects_malformed() {
        let mut v = json!({"a": 1, "b": [1]});
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a.b=2").is_err());
        assert!(apply_override(&mut v, "b.5=2").is_err());
        assert!(apply_override(&mut v, "=2").is_err());
    }
}
