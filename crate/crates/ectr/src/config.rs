//! Flat key-value run configuration with dotted section names.
//!
//! One file per run, lines of `section.key = value`, `#` comments. Every
//! key a command reads — whether it came from the file or from a default —
//! is echoed into the resolved map so the manifest records the complete
//! effective configuration. A manifest JSON file can be passed back in
//! place of a config file; its embedded config map is reused verbatim,
//! which is what makes re-runs reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Every key resolved so far with its effective value.
    resolved: std::cell::RefCell<BTreeMap<String, String>>,
    /// Keys actually read from `values`.
    consumed: std::cell::RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn from_map(values: BTreeMap<String, String>) -> Self {
        Config {
            values,
            resolved: Default::default(),
            consumed: Default::default(),
        }
    }

    /// Parses flat `key = value` text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{raw}'", ln + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", ln + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!("line {}: duplicate key '{key}'", ln + 1)));
            }
        }
        Ok(Config::from_map(values))
    }

    /// Loads a config file, or a run manifest whose embedded config map is
    /// reused for bit-identical re-runs.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: invalid manifest json: {e}", path.display())))?;
            let map = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::config(format!("{}: manifest has no config map", path.display())))?;
            let mut values = BTreeMap::new();
            for (k, val) in map {
                let s = val
                    .as_str()
                    .map(str::to_string)
                    .unwrap_or_else(|| val.to_string());
                values.insert(k.clone(), s);
            }
            return Ok(Config::from_map(values));
        }
        Config::parse(&text)
    }

    /// Forces a key to a value (CLI overrides).
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn record(&self, key: &str, value: &str) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    fn raw(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    /// String value with a default, echoed into the resolved map.
    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.raw(key).unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    /// Required string value.
    pub fn require_str(&self, key: &str) -> Result<String> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::config(format!("missing required key '{key}'")))?;
        self.record(key, &v);
        Ok(v)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => {
                self.record(key, &format!("{default}"));
                Ok(default)
            }
            Some(s) => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::config(format!("key '{key}': '{s}' is not a number")))?;
                self.record(key, &s);
                Ok(v)
            }
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => {
                self.record(key, &format!("{default}"));
                Ok(default)
            }
            Some(s) => {
                let v: u64 = s
                    .parse()
                    .map_err(|_| Error::config(format!("key '{key}': '{s}' is not an integer")))?;
                self.record(key, &s);
                Ok(v)
            }
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_u64(key, default as u64)? as usize)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => {
                self.record(key, if default { "true" } else { "false" });
                Ok(default)
            }
            Some(s) => match s.as_str() {
                "true" => {
                    self.record(key, "true");
                    Ok(true)
                }
                "false" => {
                    self.record(key, "false");
                    Ok(false)
                }
                other => Err(Error::config(format!(
                    "key '{key}': expected true/false, got '{other}'"
                ))),
            },
        }
    }

    /// Comma-separated list of numbers with a default.
    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => {
                let echo = default
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                self.record(key, &echo);
                Ok(default.to_vec())
            }
            Some(s) => {
                let v =
                    parse_f64_list(&s).map_err(|m| Error::config(format!("key '{key}': {m}")))?;
                self.record(key, &s);
                Ok(v)
            }
        }
    }

    /// Comma-separated list of integers.
    pub fn get_u64_list(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.raw(key) {
            None => {
                let echo = default
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                self.record(key, &echo);
                Ok(default.to_vec())
            }
            Some(s) => {
                let mut out = Vec::new();
                for part in s.split(',') {
                    let p = part.trim();
                    if p.is_empty() {
                        continue;
                    }
                    out.push(p.parse::<u64>().map_err(|_| {
                        Error::config(format!("key '{key}': '{p}' is not an integer"))
                    })?);
                }
                self.record(key, &s);
                Ok(out)
            }
        }
    }

    pub fn get_str_list(&self, key: &str, default: &[&str]) -> Result<Vec<String>> {
        match self.raw(key) {
            None => {
                self.record(key, &default.join(", "));
                Ok(default.iter().map(|s| s.to_string()).collect())
            }
            Some(s) => {
                let v: Vec<String> = s
                    .split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect();
                self.record(key, &s);
                Ok(v)
            }
        }
    }

    /// The complete effective configuration resolved so far.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }

    /// Errors if the file contained keys no command read (typo guard).
    pub fn check_unused(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unused: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unrecognized config keys: {}",
                unused
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let p = part.trim();
        if p.is_empty() {
            continue;
        }
        out.push(p.parse::<f64>().map_err(|_| format!("'{p}' is not a number"))?);
    }
    Ok(out)
}
