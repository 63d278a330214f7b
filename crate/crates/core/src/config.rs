//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored.
//! Command-line flags use the same key names and take precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "GAZESTEER_CONFIG";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().replace('-', "_");
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("bad key `{k}`"),
                });
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The file named by [`CONFIG_ENV`], or an empty configuration.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    /// Flag value if given, else the file's, else `default`.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let c = KvConfig::parse("# run\nlr = 0.001  # faster\n\nseed=7\ngaze-scheme = coord_pe\n").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(c.get::<String>("gaze_scheme").unwrap().as_deref(), Some("coord_pe"));
        assert_eq!(c.resolve("seed", Some(1u64), 0).unwrap(), 1);
        assert_eq!(c.resolve("seed", None, 0u64).unwrap(), 7);
        assert_eq!(c.resolve("epochs", None, 20usize).unwrap(), 20);
        assert!(c.get::<u64>("lr").is_err());
        assert!(c.check_known(&["lr", "seed"]).is_err());
        assert!(c.check_known(&["lr", "seed", "gaze_scheme"]).is_ok());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            KvConfig::parse("a = 1\nnope\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            KvConfig::parse("a = 1\na = 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(KvConfig::parse(" = 3").is_err());
    }
}
