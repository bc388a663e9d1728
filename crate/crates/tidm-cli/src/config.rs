//! Plain `key = value` configuration files. Blank lines and `#` comments
//! are ignored. Command-line flags take precedence over file values, and
//! unset keys fall back to built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use tidm_core::{Result, TidmError};

#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TidmError::io(path.display().to_string(), e))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TidmError::invalid(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { entries })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                TidmError::invalid(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Flag value if given, else config-file value, else the default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.get(key)?.unwrap_or(default)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tidm.conf");
        std::fs::write(&path, "# comment\nsteps = 25\n\nguidance = 3.0\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        // flag wins over file, file wins over default
        assert_eq!(resolve(Some(9usize), &cfg, "steps", 50).unwrap(), 9);
        assert_eq!(resolve(None::<usize>, &cfg, "steps", 50).unwrap(), 25);
        assert_eq!(resolve(None::<usize>, &cfg, "batch", 4).unwrap(), 4);
        assert_eq!(resolve(None::<f32>, &cfg, "guidance", 7.5).unwrap(), 3.0);
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "steps 25\n").unwrap();
        assert!(FileConfig::load(&path).is_err());
        std::fs::write(&path, "steps = many\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert!(cfg.get::<usize>("steps").is_err());
    }
}
