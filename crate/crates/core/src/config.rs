//! `key = value` configuration files with environment overrides.
//!
//! Lines starting with `#` are comments. Keys are lower-case with
//! underscores; every key can be overridden by an environment variable
//! named `CROSSIMPACT_<KEY>` (upper-cased).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const ENV_PREFIX: &str = "CROSSIMPACT_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let key = normalize_key(k);
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `CROSSIMPACT_*` variables from the given iterator.
    pub fn apply_env<I, K, V>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) {
                self.values
                    .insert(normalize_key(rest), v.as_ref().trim().to_string());
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(normalize_key(key), value.to_string());
    }

    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.values
            .entry(normalize_key(key))
            .or_insert_with(|| value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.values.remove(&normalize_key(key))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(Some(true)),
                "0" | "false" | "no" | "off" => Ok(Some(false)),
                _ => Err(ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                }),
            },
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }

    /// Canonical `key=value` text, sorted by key.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        crate::io::sha256_bytes(self.canonical().as_bytes())
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let s = Settings::parse("# panel\nbin_width = 5\n\nOpen-Skip=60\n").unwrap();
        assert_eq!(s.get("bin_width"), Some("5"));
        assert_eq!(s.parsed::<u32>("open_skip").unwrap(), Some(60));
        assert!(Settings::parse("novalue").is_err());
    }

    #[test]
    fn env_overrides_file() {
        let mut s = Settings::parse("ridge=1e-4").unwrap();
        s.apply_env([("CROSSIMPACT_RIDGE", "0.01"), ("OTHER", "x")]);
        assert_eq!(s.parsed::<f64>("ridge").unwrap(), Some(0.01));
        assert_eq!(s.get("other"), None);
    }

    #[test]
    fn digest_ignores_insertion_order() {
        let mut a = Settings::new();
        a.set("x", 1);
        a.set("y", 2);
        let mut b = Settings::new();
        b.set("y", 2);
        b.set("x", 1);
        assert_eq!(a.digest(), b.digest());
    }
}
