//! Flat `key=value` config files and flag/config/env/default resolution.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "CTKIT_SEED";

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = normalize_key(k);
            if key.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.display().to_string()))?;
                Self::parse(&text)
            }
        }
    }

    fn take(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    /// Fails on keys that no resolved setting asked for.
    pub fn finish(&self) -> CliResult<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(CliError::Config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

/// Resolved settings of one run, recorded verbatim in the manifest.
#[derive(Debug, Default)]
pub struct Resolver {
    pub file: ConfigFile,
    pub resolved: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl Resolver {
    pub fn new(file: ConfigFile) -> Self {
        Self {
            file,
            ..Self::default()
        }
    }

    pub fn warn(&mut self, w: String) {
        eprintln!("warning: {w}");
        self.warnings.push(w);
    }

    /// Flag beats config file beats default; a flag overriding a different
    /// config value emits a warning.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + ToString + Clone,
    {
        let from_file = match self.file.take(key) {
            Some(text) => Some(
                text.parse::<T>()
                    .map_err(|_| CliError::Config(format!("bad value {text:?} for {key}")))?,
            ),
            None => None,
        };
        let value = match (flag, from_file) {
            (Some(f), Some(c)) => {
                if f.to_string() != c.to_string() {
                    let w = format!("flag --{key}={} overrides config value {}", f.to_string(), c.to_string());
                    self.warn(w);
                }
                f
            }
            (Some(f), None) => f,
            (None, Some(c)) => c,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] but without a default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + ToString + Clone,
    {
        let fallback = match (&flag, self.file.entries.get(key)) {
            (Some(f), _) => f.clone(),
            (None, Some(text)) => text
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("bad value {text:?} for {key}")))?,
            (None, None) => return Err(CliError::Config(format!("missing required setting {key}"))),
        };
        self.get(key, flag, fallback)
    }

    /// Seed precedence: flag, config file, `CTKIT_SEED`, then `default`.
    pub fn seed(&mut self, flag: Option<u64>, default: u64) -> CliResult<u64> {
        let env_default = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            Err(_) => default,
        };
        self.get("seed", flag, env_default)
    }
}

/// Comma-separated list such as `2,7,1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Widths)
    }
}

impl std::fmt::Display for Widths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}
