//! The `--config` file: flat `key = value` lines (an optional `[section]`
//! header prefixes the keys that follow with `section.`). Flags always win
//! over file values, which win over defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use scbd::util::kv;

use crate::CliError;

pub struct FileConfig {
    cmd: &'static str,
    map: BTreeMap<String, String>,
}

impl FileConfig {
    /// Parses `path` when given; no file means every lookup falls through
    /// to the flag or the default.
    pub fn load(cmd: &'static str, path: Option<&Path>) -> Result<Self, CliError> {
        let map = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage {
                    cmd,
                    message: format!("cannot read config file {}: {e}", p.display()),
                })?;
                kv::parse(&text).map_err(|e| CliError::Usage {
                    cmd,
                    message: format!("config file {}: {e}", p.display()),
                })?
            }
        };
        Ok(FileConfig { cmd, map })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Typed lookup; a present but unparsable value is a usage error.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(s) => s.trim().parse::<T>().map(Some).map_err(|_| CliError::Usage {
                cmd: self.cmd,
                message: format!("config key {key}: cannot parse {s:?}"),
            }),
        }
    }

    /// Flag over file over default.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Flag over file, with no default.
    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.get(key)?,
        })
    }
}

/// Parses a comma-separated grid flag such as `--alphas 0,8,64`.
pub fn parse_list<T: FromStr>(
    cmd: &'static str,
    what: &str,
    text: &str,
) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<T>().map_err(|_| CliError::Usage {
            cmd,
            message: format!("bad {what} entry {part:?}"),
        })?);
    }
    if out.is_empty() {
        return Err(CliError::Usage {
            cmd,
            message: format!("the {what} list is empty"),
        });
    }
    Ok(out)
}
