//! Effective-config assembly: defaults, then a flat dotted-key JSON file,
//! then command-line overrides. The result is echoed into summary.json by the
//! trainer, so a run directory always records the exact config that produced it.

use std::path::Path;

use anyhow::Result;
use farl_core::trainer::RunConfig;
use farl_core::FarlError;
use serde_json::Value;

/// Overlay order: `RunConfig::default()` < config file < explicit overrides.
pub fn effective_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default()).map_err(FarlError::from)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            FarlError::InvalidConfig(format!("config file {}: {e}", path.display()))
        })?;
        let flat: serde_json::Map<String, Value> = serde_json::from_str(&text).map_err(|e| {
            FarlError::InvalidConfig(format!("config file {}: {e}", path.display()))
        })?;
        for (k, v) in flat {
            set_dotted(&mut tree, &k, v)?;
        }
    }
    for (k, v) in overrides {
        set_dotted(&mut tree, k, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| FarlError::InvalidConfig(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Set `tree[a][b][c]` for key `a.b.c`. Keys must already exist in the
/// default tree; anything else is a typo worth rejecting loudly.
fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || FarlError::InvalidConfig(format!("unknown config key {key:?}"));
    let mut cur = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur.get_mut(*part).ok_or_else(unknown)?;
    }
    let slot = cur
        .get_mut(parts.last().expect("split yields at least one part"))
        .ok_or_else(unknown)?;
    if slot.is_object() && !value.is_object() {
        return Err(FarlError::InvalidConfig(format!(
            "config key {key:?} names a section, not a value"
        ))
        .into());
    }
    *slot = value;
    Ok(())
}

/// Parse a `--set key=value` pair; the value is JSON when it parses as JSON,
/// otherwise a bare string (so `--set task=bounded-push` works unquoted).
pub fn parse_override(pair: &str) -> Result<(String, Value)> {
    let (key, raw) = pair.split_once('=').ok_or_else(|| {
        FarlError::InvalidConfig(format!("--set expects key=value, got {pair:?}"))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
