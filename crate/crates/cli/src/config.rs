//! Flat `key = value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, later entries win. Lists are
//! comma separated. Every subcommand declares its keys with defaults; a key
//! it does not know is an error, so typos never fall back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot use `{value}` ({reason})")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
}

impl ConfigError {
    pub fn invalid(key: &str, value: impl fmt::Display, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line).map_err(|_| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: 0,
                text: assignment.to_string(),
            });
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Fills in `defaults` for missing keys and rejects keys not among them.
    pub fn with_defaults(mut self, defaults: &[(&str, &str)]) -> Result<Self, ConfigError> {
        if let Some(k) = self.entries.keys().find(|k| !defaults.iter().any(|(d, _)| d == k)) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        for (k, v) in defaults {
            self.entries.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
        Ok(self)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get_raw(key).ok_or_else(|| ConfigError::invalid(key, "", "missing"))?;
        raw.parse().map_err(|e: T::Err| ConfigError::invalid(key, raw, e.to_string()))
    }

    /// `None` for an empty value or `auto`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get_raw(key) {
            None | Some("") | Some("auto") => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get_raw(key).unwrap_or("");
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| ConfigError::invalid(key, raw, e.to_string())))
            .collect()
    }

    /// Parses a kebab-case enum name through serde.
    pub fn get_enum<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.get_raw(key).unwrap_or("");
        serde_json::from_value(serde_json::Value::String(raw.to_string()))
            .map_err(|e| ConfigError::invalid(key, raw, e.to_string()))
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_overrides() {
        let mut c = Config::parse("# header\nd = 100\n\np=2 # trailing\nd = 200\n").unwrap();
        assert_eq!(c.get::<usize>("d").unwrap(), 200);
        assert_eq!(c.get::<usize>("p").unwrap(), 2);
        c.apply("p = 3").unwrap();
        assert_eq!(c.get::<usize>("p").unwrap(), 3);
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.set("gamma", 0.1f64);
        c.set("widths", "1,2,4");
        c.set("tiny", 1.234_567_890_123_456_7e-300f64);
        let back = Config::parse(&c.to_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<f64>("tiny").unwrap(), 1.234_567_890_123_456_7e-300);
        assert_eq!(back.get_list::<usize>("widths").unwrap(), vec![1, 2, 4]);
    }

    #[test]
    fn errors_name_the_field() {
        let c = Config::parse("d = ten").unwrap();
        let e = c.get::<usize>("d").unwrap_err().to_string();
        assert!(e.contains("`d`"), "{e}");
        assert!(matches!(Config::parse("no equals sign"), Err(ConfigError::Syntax { line: 1, .. })));
        let unknown = Config::parse("dd = 1").unwrap().with_defaults(&[("d", "1")]);
        assert!(matches!(unknown, Err(ConfigError::UnknownKey(k)) if k == "dd"));
    }

    #[test]
    fn defaults_fill_gaps_only() {
        let c = Config::parse("d = 5").unwrap().with_defaults(&[("d", "1"), ("p", "2")]).unwrap();
        assert_eq!(c.get::<usize>("d").unwrap(), 5);
        assert_eq!(c.get::<usize>("p").unwrap(), 2);
        assert_eq!(c.get_opt::<f64>("p").unwrap(), Some(2.0));
    }

    #[test]
    fn enums_use_kebab_case() {
        let c = Config::parse("init = spherical-uniform\nbad = round").unwrap();
        let m: medlab::ode::InitMode = c.get_enum("init").unwrap();
        assert_eq!(m, medlab::ode::InitMode::SphericalUniform);
        assert!(c.get_enum::<medlab::ode::InitMode>("bad").is_err());
    }
}
