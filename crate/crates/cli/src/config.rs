//! JSON run configuration layered over command-line flags.
//!
//! Each section of the file is merged field by field onto the value built
//! from flags, so a file only needs the fields it wants to pin.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "DMASEG_OUTPUT_ROOT";

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub synthetic: Option<Value>,
    #[serde(default)]
    pub model: Option<Value>,
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default)]
    pub episode: Option<Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// `value` with `section` merged over it.
pub fn overlay<T: Serialize + DeserializeOwned>(value: T, section: Option<&Value>, name: &str) -> Result<T> {
    let Some(patch) = section else { return Ok(value) };
    let mut base = serde_json::to_value(&value)?;
    merge(&mut base, patch);
    serde_json::from_value(base).with_context(|| format!("config section `{name}`"))
}

/// Resolves an output path against the output-root variable when relative.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
