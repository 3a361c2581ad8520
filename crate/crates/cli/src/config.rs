//! Parameter resolution: command-line flags win over the config file, which
//! wins over built-in defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use tempres_core::io::parse_key_values;

use crate::error::{usage, CliError, Result};

/// `key = value` pairs from a config file (or a previous run manifest).
///
/// A key may be qualified with the subcommand, as in `resolve.eta`; the
/// qualified form takes precedence over the bare one.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self { entries: parse_key_values(text)? })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return usage(format!("config file {} not found", path.display()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, subcommand: &str, key: &str) -> Option<&str> {
        let qualified = format!("{subcommand}.{key}");
        let find = |k: &str| self.entries.iter().rev().find(|(e, _)| e == k).map(|(_, v)| v.as_str());
        find(&qualified).or_else(|| find(key))
    }
}

/// Resolves parameters for one subcommand and records the final values.
pub struct Params<'a> {
    subcommand: &'static str,
    config: &'a ConfigFile,
    resolved: Vec<(String, String)>,
}

impl<'a> Params<'a> {
    pub fn new(subcommand: &'static str, config: &'a ConfigFile) -> Self {
        Self { subcommand, config, resolved: Vec::new() }
    }

    fn configured<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.config.get(self.subcommand, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config value '{raw}' is not valid for {key}"))),
        }
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.configured(key)?,
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.configured(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.configured::<bool>(key)?.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    /// Comma-separated list; the flag replaces the config list as a whole.
    pub fn list<T: FromStr + Display>(&mut self, key: &str, flag: Vec<T>) -> Result<Vec<T>> {
        let v = if !flag.is_empty() {
            flag
        } else {
            match self.config.get(self.subcommand, key) {
                None => Vec::new(),
                Some(raw) => raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad list entry '{s}' for {key}"))))
                    .collect::<Result<_>>()?,
            }
        };
        let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        self.resolved.push((key.to_string(), joined.join(",")));
        Ok(v)
    }

    pub fn record(&mut self, key: &str, value: &dyn Display) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    pub fn subcommand(&self) -> &'static str {
        self.subcommand
    }

    pub fn into_resolved(self) -> Vec<(String, String)> {
        self.resolved
    }
}
