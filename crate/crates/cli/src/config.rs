//! `key=value` run configuration merged with command-line flags.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct RunConfig {
    given: BTreeMap<String, String>,
    effective: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    /// Parses `path` (if any); blank lines and `#` comments are skipped.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let Some(path) = path else {
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value, got `{line}`", path.display(), i + 1))
            })?;
            cfg.given.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    /// Command-line values override the file.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.given.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T, CliError> {
        let value = match self.given.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for key `{key}`")))?,
            None => default,
        };
        self.effective.borrow_mut().insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Absent keys and the words `none`/`unbounded` map to `None`.
    pub fn get_opt<T: FromStr + Display>(&self, key: &str) -> Result<Option<T>, CliError> {
        let value = match self.given.get(key).map(String::as_str) {
            None | Some("none") | Some("unbounded") => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for key `{key}`")))?,
            ),
        };
        let shown = value.as_ref().map_or_else(|| "none".to_string(), ToString::to_string);
        self.effective.borrow_mut().insert(key.to_string(), shown);
        Ok(value)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.given.contains_key(key)
    }

    /// Rejects keys no consumer asked for.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.effective.borrow();
        match self.given.keys().find(|k| !used.contains_key(*k)) {
            Some(k) => Err(CliError::Usage(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Every consumed key with the value in effect, one `key=value` per line.
    pub fn echo(&self) -> String {
        self.effective.borrow().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
