use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads a JSON config, applies `key=value` overrides and re-parses it.
///
/// Overrides address fields of the fully-defaulted config, so a key left out
/// of the file can still be overridden but an unknown key is rejected.
pub fn load<T: Serialize + DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let parsed: T = serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
    apply(parsed, overrides)
}

pub fn apply<T: Serialize + DeserializeOwned>(cfg: T, overrides: &[String]) -> Result<T, String> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut root = serde_json::to_value(&cfg).map_err(|e| e.to_string())?;
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| format!("override {o:?} is not of the form key=value"))?;
        if let Some((_, prev)) = seen.iter().find(|(k, _)| *k == key) {
            if *prev != raw {
                return Err(format!("conflicting overrides for {key}: {prev:?} and {raw:?}"));
            }
        }
        seen.push((key, raw));
        let slot = lookup(&mut root, key)?;
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_value(root).map_err(|e| format!("overrides give an invalid config: {e}"))
}

fn lookup<'a>(root: &'a mut Value, key: &str) -> Result<&'a mut Value, String> {
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(move |i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| format!("override key {key:?} does not name a config field"))?;
    }
    Ok(node)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotformer_core::train::TrainConfig;
    use cotformer_core::{ModelConfig, Variant};

    fn base() -> TrainConfig {
        serde_json::from_value(serde_json::json!({
            "model": ModelConfig::new(Variant::Cotformer, (1, 2, 1), 2, 16, 2, 256, 32),
            "steps": 10,
            "max_lr": 0.001,
            "batch_size": 2,
            "seq_len": 32
        }))
        .unwrap()
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn nested_keys_are_replaced() {
        let cfg = apply(base(), &strings(&["model.n_repeat=3", "model.variant=block_universal", "data.synthetic_seed=4"]))
            .unwrap();
        assert_eq!(cfg.model.n_repeat, 3);
        assert_eq!(cfg.model.variant, Variant::BlockUniversal);
        assert_eq!(cfg.data.synthetic_seed, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(apply(base(), &strings(&["model.depth=3"])).unwrap_err().contains("does not name"));
        assert!(apply(base(), &strings(&["steps"])).is_err());
        assert!(apply(base(), &strings(&["steps=many"])).is_err());
        assert!(apply(base(), &strings(&["model.variant=mixer"])).is_err());
    }

    #[test]
    fn conflicting_overrides_fail() {
        assert!(apply(base(), &strings(&["steps=3", "steps=4"])).unwrap_err().contains("conflicting"));
        assert_eq!(apply(base(), &strings(&["steps=3", "steps=3"])).unwrap().steps, 3);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = apply(base(), &strings(&["model.adaptive=true"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        write_json(&cfg, &path).unwrap();
        assert_eq!(load::<TrainConfig>(&path, &[]).unwrap(), cfg);
    }
}
