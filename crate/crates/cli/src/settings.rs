//! Layering of defaults, the config file and explicit flags.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

const GLOBAL_KEYS: [&str; 2] = ["seed", "threads"];

/// A parsed config file: top-level `seed` and `threads`, plus one table per
/// subcommand. A run manifest is accepted in place of a config file.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let value: Value = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        };
        let mut root = match value {
            Value::Object(m) => m,
            _ => return Err(CliError::Usage("config must be a table".into())),
        };
        if root.contains_key("manifest_version") {
            root = match root.remove("config") {
                Some(Value::Object(m)) => m,
                _ => return Err(CliError::Usage("manifest has no config table".into())),
            };
        }
        Ok(Self { root })
    }

    pub fn check_keys(&self, commands: &[&str]) -> CliResult<()> {
        for key in self.root.keys() {
            if !GLOBAL_KEYS.contains(&key.as_str()) && !commands.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn global<T: DeserializeOwned>(&self, key: &str) -> CliResult<Option<T>> {
        self.root
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| CliError::Usage(format!("config key '{key}': {e}")))
            })
            .transpose()
    }

    pub fn table(&self, command: &str) -> Option<&Value> {
        self.root.get(command)
    }
}

/// Overlays `table` onto `args` for every field not given on the command line.
pub fn merge<T: Serialize + DeserializeOwned>(
    command: &str,
    args: &T,
    matches: &ArgMatches,
    table: Option<&Value>,
) -> CliResult<T> {
    let mut value = serde_json::to_value(args)?;
    let fields = value
        .as_object_mut()
        .ok_or_else(|| CliError::Internal("arguments are not a struct".into()))?;
    if let Some(table) = table {
        let table = table
            .as_object()
            .ok_or_else(|| CliError::Usage(format!("config '{command}' must be a table")))?;
        for (key, v) in table {
            if !fields.contains_key(key) {
                return Err(CliError::Usage(format!("unknown config key '{command}.{key}'")));
            }
            if matches.value_source(key) != Some(ValueSource::CommandLine) {
                fields.insert(key.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("config '{command}': {e}")))
}
