//! Flat key-value config files: `key = value` lines, `[section]` headers as
//! grouping labels, '#' comments. Keys live in one flat namespace so a run
//! is reproducible from a single file; command-line flags override file
//! values, and unknown keys are rejected against the active subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Parsed config file: a flat map plus the section each key appeared under
/// (for error messages only).
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(format!("line {}: malformed section header", lineno + 1));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                ));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(format!("line {}: empty key or value", lineno + 1));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key '{key}'", lineno + 1));
            }
        }
        Ok(Self { values })
    }

    /// Reject keys outside the allowed set for the active subcommand.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), String> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(format!(
                    "unknown config key '{key}' (allowed: {})",
                    allowed.join(", ")
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed lookup; parse failures carry the key name.
    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("config key '{key}': cannot parse '{v}'")),
        }
    }
}

/// `or_file(cli, file)`: command line wins, then the config file.
pub fn or_file<T>(cli: Option<T>, file: Option<T>) -> Option<T> {
    cli.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let cfg = FileConfig::parse(
            "# run parameters\n[measure]\nmodel = ou2\ntau = 3.0\n\n[output]\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.get("model"), Some("ou2"));
        assert_eq!(cfg.get_parsed::<f64>("tau").unwrap(), Some(3.0));
        assert_eq!(cfg.get_parsed::<u64>("seed").unwrap(), Some(7));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(FileConfig::parse("tau 3.0\n").is_err());
        assert!(FileConfig::parse("tau = 3\ntau = 4\n").is_err());
        assert!(FileConfig::parse("[unclosed\n").is_err());
        assert!(FileConfig::parse("tau =\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = FileConfig::parse("model = ou2\nbogus = 1\n").unwrap();
        assert!(cfg.check_keys(&["model", "tau"]).is_err());
        assert!(cfg.check_keys(&["model", "bogus"]).is_ok());
    }
}
