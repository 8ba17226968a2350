//! Run manifests: a TOML file with optional top-level `command`, `seed` and `out`, plus one
//! table per subcommand (`[check]`, `[solve-linear]`, ...). Flags override manifest fields.

use crate::error::CliError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

/// Parameter keys that name files. Manifest values are resolved against the manifest's directory.
const PATH_KEYS: &[&str] = &["input", "rhs", "decomposition", "tensor"];

#[derive(Debug, Default)]
pub struct Manifest {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    tables: Map<String, Value>,
    base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read manifest {}: {e}", path.display())))?;
        let doc: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Parse(format!("manifest {}: {e}", path.display())))?;
        let mut value = serde_json::to_value(doc).map_err(|e| CliError::Parse(e.to_string()))?;
        let obj = value.as_object_mut().expect("a TOML document is a table");
        let command = match obj.remove("command") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(CliError::Parse("manifest `command` must be a string".into())),
        };
        let seed = match obj.remove("seed") {
            None => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| CliError::Parse("manifest `seed` must be a nonnegative integer".into()))?),
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = match obj.remove("out") {
            None => None,
            Some(Value::String(s)) => Some(base.join(s)),
            Some(_) => return Err(CliError::Parse("manifest `out` must be a string".into())),
        };
        for (k, v) in obj.iter() {
            if !v.is_object() {
                return Err(CliError::Parse(format!("unexpected top-level manifest key `{k}`")));
            }
        }
        Ok(Manifest { command, seed, out, tables: std::mem::take(obj), base })
    }

    /// Overlays the flags on the manifest table for `command`.
    pub fn merge<T: Serialize + DeserializeOwned>(&self, command: &str, flags: &T) -> Result<T, CliError> {
        let mut merged = match self.tables.get(command) {
            Some(Value::Object(t)) => t.clone(),
            _ => Map::new(),
        };
        for key in PATH_KEYS {
            if let Some(Value::String(s)) = merged.get(*key) {
                let p = self.base.join(s);
                merged.insert((*key).into(), Value::String(p.to_string_lossy().into_owned()));
            }
        }
        let flags = serde_json::to_value(flags).map_err(|e| CliError::Internal(e.into()))?;
        if let Value::Object(f) = flags {
            for (k, v) in f {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Parse(format!("[{command}] parameters: {e}")))
    }
}
