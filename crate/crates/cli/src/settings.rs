//! `key = value` settings files and path resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::usage;

pub const DATA_DIR_ENV: &str = "METAWORD_DATA_DIR";

/// Relative paths are taken from `$METAWORD_DATA_DIR` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Parsed settings file. Keys are long flag names; `-` and `_` are
/// interchangeable. Blank lines and `#` comments are ignored.
#[derive(Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let path = resolve(path);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, allowed).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().replace('_', "-");
            if !allowed.contains(&k.as_str()) {
                return Err(usage(format!("line {}: unknown setting {k:?}", i + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value, else file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    /// Flag value, else file value.
    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|raw| raw.parse().map_err(|e| usage(format!("setting {key} = {raw:?}: {e}"))))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_values() {
        let s = Settings::parse("# run\nd = 32\nbatch_size=8\n", &["d", "batch-size", "lambda"]).unwrap();
        assert_eq!(s.pick(None, "d", 64usize).unwrap(), 32);
        assert_eq!(s.pick(Some(16usize), "d", 64).unwrap(), 16);
        assert_eq!(s.pick(None, "batch-size", 1usize).unwrap(), 8);
        assert_eq!(s.pick(None, "lambda", 1.0f64).unwrap(), 1.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Settings::parse("colour = red", &["d"]).is_err());
        assert!(Settings::parse("d 3", &["d"]).is_err());
        let s = Settings::parse("d = many", &["d"]).unwrap();
        assert!(s.pick::<usize>(None, "d", 1).is_err());
    }
}
