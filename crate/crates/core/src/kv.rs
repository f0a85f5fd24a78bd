//! Flat `key=value` text, one pair per line, `#` starting a comment line.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            let k = k.trim();
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad value '{v}' for {key}"))))
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `known` that do not start with one of `open_prefixes`.
    pub fn reject_unknown(&self, known: &[&str], open_prefixes: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) && !open_prefixes.iter().any(|p| k.starts_with(p)) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}
