//! Flat `key = value` configuration text with `#` comments.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

impl ConfigError {
    pub fn bad(key: &str, value: &str, reason: impl Into<String>) -> Self {
        Self::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
    }
}

/// Parsed key-value pairs. Lookups mark keys as used so leftovers can be
/// rejected with [`KeyValues::reject_unused`].
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    /// Adds or replaces a value; `spec` is `key=value`.
    pub fn set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn merge(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| ConfigError::bad(key, v, "cannot parse")))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Parses with a custom function.
    pub fn get_with<T>(&self, key: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        self.raw(key).map(|v| f(v).map_err(|r| ConfigError::bad(key, v, r))).transpose()
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    /// They count as used.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        self.allow_prefix(prefix);
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    /// Marks every key with the given prefix as known.
    pub fn allow_prefix(&self, prefix: &str) {
        let mut used = self.used.borrow_mut();
        for k in self.entries.keys().filter(|k| k.starts_with(prefix)) {
            used.insert(k.clone());
        }
    }

    pub fn reject_unused(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

/// `HH:MM` to minutes after midnight.
pub fn parse_clock(s: &str) -> Result<f64, String> {
    let (h, m) = s.trim().split_once(':').ok_or_else(|| format!("`{s}` is not HH:MM"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad hour in `{s}`"))?;
    let m: u32 = m.parse().map_err(|_| format!("bad minute in `{s}`"))?;
    if h > 24 || m > 59 || (h == 24 && m > 0) {
        return Err(format!("`{s}` is not a time of day"));
    }
    Ok((h * 60 + m) as f64)
}

pub fn format_clock(minutes: f64) -> String {
    let m = minutes.round() as i64;
    format!("{:02}:{:02}", m / 60, m % 60)
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| format!("bad list entry `{x}`")))
        .collect()
}

/// `x:y` pairs separated by commas, e.g. `0:200, 6.5:1300`.
pub fn parse_knots(s: &str) -> Result<Vec<(f64, f64)>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|p| {
            let (x, y) = p.split_once(':').ok_or_else(|| format!("`{p}` is not x:y"))?;
            Ok((x.trim().parse().map_err(|_| format!("bad x in `{p}`"))?, y.trim().parse().map_err(|_| format!("bad y in `{p}`"))?))
        })
        .collect()
}
