//! `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use the long
//! flag spelling (`max-iters`, `out-dir`); underscores are accepted too.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let v = v.trim().trim_matches('"');
            values.insert(normalize_key(k), v.to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|m| CliError::validation("ConfigError", format!("{}: {m}", path.display())))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(String::as_str)
    }
}

/// Resolves options as flag > config file > default, recording each result.
pub struct Resolver<'a> {
    config: &'a ConfigFile,
    pub resolved: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(config: &'a ConfigFile) -> Self {
        Resolver {
            config,
            resolved: BTreeMap::new(),
        }
    }

    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + ToString,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.config.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    CliError::validation("ConfigError", format!("cannot parse config value {key} = {raw:?}"))
                })?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }
}

/// Parses `lo,hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range(pub f64, pub f64);

impl FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| format!("expected lo,hi but got {s:?}"))?;
        let lo = lo.trim().parse().map_err(|_| format!("bad number {lo:?}"))?;
        let hi = hi.trim().parse().map_err(|_| format!("bad number {hi:?}"))?;
        Ok(Range(lo, hi))
    }
}

impl std::fmt::Display for Range {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.0, self.1)
    }
}
