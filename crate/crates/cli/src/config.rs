//! Flat `key=value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides, then dedicated flags such as `--seed`. Every key a subcommand
//! reads must appear in its defaults table, so typos are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use xt2t::io::read_text;
use xt2t::{Error, Result};

/// Parses `key=value` lines; `#` starts a comment line, blank lines are
/// ignored.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_pair(line).map_err(|e| Error::Format(format!("config line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(
        defaults: &[(&str, &str)],
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut set = |k: String, v: String, origin: &str| -> Result<()> {
            match values.get_mut(&k) {
                Some(slot) => {
                    *slot = v;
                    Ok(())
                }
                None => Err(Error::InvalidArgument(format!("unknown config key {k:?} ({origin})"))),
            }
        };
        if let Some(path) = file {
            for (k, v) in parse_flat(&read_text(path)?)? {
                set(k, v, &path.display().to_string())?;
            }
        }
        for o in overrides {
            let (k, v) = parse_pair(o).map_err(Error::InvalidArgument)?;
            set(k, v, "--set")?;
        }
        if let Some(s) = seed {
            set("seed".into(), s.to_string(), "--seed")?;
        }
        Ok(Self { values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key} missing from defaults table"))
    }

    /// Empty values mean "unset".
    pub fn opt_str(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|s| !s.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {raw:?}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.opt_str(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.opt_str(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::InvalidArgument(format!("config key {key} is required")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {s:?}")))
            })
            .collect()
    }

    pub fn with(&self, key: &str, value: impl ToString) -> Self {
        let mut c = self.clone();
        c.values.insert(key.to_string(), value.to_string());
        c
    }

    /// Sorted `key=value` lines; feeding them back through [`RunConfig::resolve`]
    /// gives the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}
