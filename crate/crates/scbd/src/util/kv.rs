//! Flat `[section]` / `key = value` text format.
//!
//! Used for run configs, checkpoint config echoes and artifact sidecars.
//! Parsing is strict: a line is a comment (`#`), blank, a `[section]` header,
//! or `key = value`; anything else is an error naming the line. Keys are
//! namespaced as `section.key` (or bare `key` before any header). Rendering
//! sorts keys, so parse→render is canonical and stable.

use std::collections::BTreeMap;
use std::fmt;

/// Parse failure with the 1-based line number.
#[derive(Debug, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct KvError {
    pub line: usize,
    pub reason: String,
}

/// Parses the format into a sorted `section.key -> value` map.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, KvError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(KvError {
                    line: i + 1,
                    reason: format!("unterminated section header {line:?}"),
                });
            };
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KvError {
                line: i + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(KvError {
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        out.insert(full, value.trim().to_string());
    }
    Ok(out)
}

/// Renders a map back to the text format, grouping by section, keys sorted.
/// Bare keys come first so they stay outside any section when re-parsed.
pub fn render(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (key, value) in map.iter().filter(|(k, _)| !k.contains('.')) {
        let _ = fmt::Write::write_fmt(&mut out, format_args!("{key} = {value}\n"));
    }
    let mut current = String::new();
    for (full, value) in map {
        let Some((section, key)) = full.split_once('.') else {
            continue;
        };
        if section != current {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = fmt::Write::write_fmt(&mut out, format_args!("[{section}]\n"));
            current = section.to_string();
        }
        let _ = fmt::Write::write_fmt(&mut out, format_args!("{key} = {value}\n"));
    }
    out
}

/// Typed accessors over a parsed map, tracking the keys actually consumed so
/// callers can reject typos.
pub struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a BTreeMap<String, String>) -> Self {
        Self {
            map,
            consumed: Default::default(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&'a str> {
        let v = self.map.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|_| KvError {
                line: 0,
                reason: format!("key {key}: cannot parse {s:?}"),
            }),
        }
    }

    /// Keys present in the map but never read.
    pub fn unknown_keys(&self) -> Vec<String> {
        let consumed = self.consumed.borrow();
        self.map
            .keys()
            .filter(|k| !consumed.contains(*k))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_render() {
        let text = "# comment\ntop = 1\n[train]\nlr = 0.0001\nsteps = 3000\n\n[data]\nseed = 7\n";
        let map = parse(text).unwrap();
        assert_eq!(map.get("train.lr").unwrap(), "0.0001");
        assert_eq!(map.get("top").unwrap(), "1");
        let rendered = render(&map);
        let reparsed = parse(&rendered).unwrap();
        assert_eq!(map, reparsed);
    }

    #[test]
    fn bad_lines_name_their_line_number() {
        let err = parse("ok = 1\nnot a kv line\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = parse("[unclosed\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn reader_tracks_unknown_keys() {
        let map = parse("a = 1\nb = 2\n").unwrap();
        let reader = KvReader::new(&map);
        let a: Option<i32> = reader.parse_as("a").unwrap();
        assert_eq!(a, Some(1));
        assert_eq!(reader.unknown_keys(), vec!["b".to_string()]);
    }
}
