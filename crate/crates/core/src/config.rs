//! Flat `key = value` configuration documents.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! section.key = value   # trailing comment
//! ```
//!
//! Keys are dotted identifiers, values run to the end of the line (or to a
//! `#`), surrounding whitespace is trimmed, and a key may appear only once.
//! Lists are comma separated.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(Error::config(key, format!("line {}: malformed key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(key, format!("line {}: duplicate key", lineno + 1)));
            }
        }
        Ok(ConfigDoc { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get(key) else {
            return Ok(default);
        };
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse list item `{item}`: {e}")))
            })
            .collect()
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }

    /// Canonical text: sorted, one `key = value` per line.
    pub fn to_canonical_string(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
