//! JSON config files merged under command-line flags.

use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use tupcore::{Error, Result};

/// Reads a config file; the top level must be an object.
pub fn read(path: &Path) -> Result<Map<String, Value>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ArtifactNotFound(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })?;
    match serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))? {
        Value::Object(map) => Ok(map),
        _ => Err(Error::Config(format!("{}: top level must be a JSON object", path.display()))),
    }
}

/// Fills unset flag fields from `file`. A flag that is set and disagrees with
/// the file wins, with a warning. Keys not known to `A` are rejected.
pub fn merge<A: Serialize + DeserializeOwned>(flags: &A, file: Option<&Value>, scope: &str) -> Result<A> {
    let mut merged = serde_json::to_value(flags)?;
    if let Some(file) = file {
        let Value::Object(file) = file else {
            return Err(Error::Config(format!("config section `{scope}` must be an object")));
        };
        let target = merged.as_object_mut().expect("argument structs serialize to objects");
        for (key, value) in file {
            match target.get(key) {
                None => return Err(Error::Config(format!("unknown config key `{scope}.{key}`"))),
                Some(Value::Null) => {
                    target.insert(key.clone(), value.clone());
                }
                Some(current) if current != value => {
                    warn!("--{} overrides `{scope}.{key}` from the config file", key.replace('_', "-"));
                }
                Some(_) => {}
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("{scope}: {e}")))
}
