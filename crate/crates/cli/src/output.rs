//! Canonical JSON artifacts and the run lock.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

pub const LOCK_FILE: &str = "run.lock.json";

/// Pretty JSON with object keys sorted, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let v = sort_keys(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, canonical_json(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {} (did the previous stage run?)", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
pub struct StageRecord<'a, C: Serialize> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: u64,
    pub version: &'a str,
    pub config: &'a C,
}

/// Record one stage in `run.lock.json`, keeping the entries of earlier stages.
pub fn update_lock<C: Serialize>(out_dir: &Path, record: &StageRecord<'_, C>) -> anyhow::Result<()> {
    let path = out_dir.join(LOCK_FILE);
    let mut stages: BTreeMap<String, Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<BTreeMap<String, Value>>(&t).ok())
        .and_then(|mut m| m.remove("stages"))
        .and_then(|s| serde_json::from_value(s).ok())
        .unwrap_or_default();
    stages.insert(record.command.to_string(), serde_json::to_value(record)?);
    let mut lock = BTreeMap::new();
    lock.insert("stages".to_string(), serde_json::to_value(stages)?);
    write_json(&path, &lock)
}
