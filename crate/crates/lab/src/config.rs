//! TOML run configuration with dotted-key overrides.

use std::path::Path;

use groundlab_core::harness::RunConfig;

use crate::error::{LabError, LabResult};

/// Parses a `key=value` override; the value is read as a TOML literal and
/// falls back to a bare string (`method=igv`).
fn parse_override(spec: &str) -> LabResult<(Vec<String>, toml::Value)> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| LabError::config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(LabError::config(format!("override key `{key}` has an empty segment")));
    }
    Ok((path, value))
}

/// Sets `path` inside `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> LabResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| LabError::config(format!("`{seg}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Builds a config from optional TOML text plus overrides, then validates it.
pub fn config_from_str(text: Option<&str>, overrides: &[String]) -> LabResult<RunConfig> {
    let mut table: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| LabError::config(e.to_string()))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| LabError::config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> LabResult<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(LabError::file(p))?),
        None => None,
    };
    let config = config_from_str(text.as_deref(), overrides)?;
    if let Some(ds) = &config.dataset {
        if !Path::new(ds).exists() {
            return Err(LabError::config(format!("dataset path {ds} does not exist")));
        }
    }
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> LabResult<String> {
    toml::to_string_pretty(config).map_err(|e| LabError::config(e.to_string()))
}
