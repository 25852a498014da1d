//! Flat `key = value` text format shared by kernel configs, saved models and
//! the experiment harness.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored and
//! duplicate keys are rejected. Lists are comma separated; nested lists use
//! `;` between rows.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{CpoeError, Result};

#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CpoeError::parse(line_no, "expected 'key = value'"))?;
            let key = k.trim();
            if key.is_empty() || key.chars().any(char::is_whitespace) {
                return Err(CpoeError::parse(line_no, format!("invalid key '{key}'")));
            }
            if entries
                .insert(key.to_string(), (line_no, v.trim().to_string()))
                .is_some()
            {
                return Err(CpoeError::parse(line_no, format!("duplicate key '{key}'")));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let line = self.entries.len() + 1;
        self.entries.insert(key.into(), (line, value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Line of `key`, or 0 when absent.
    pub fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    pub fn err_at(&self, key: &str, msg: &str) -> CpoeError {
        CpoeError::parse(self.line(key), format!("{key}: {msg}"))
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CpoeError::parse(0, format!("missing key '{key}'")))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let s = self.str(key)?;
        s.parse()
            .map_err(|_| self.err_at(key, &format!("cannot parse '{s}'")))
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.value(key)
        } else {
            Ok(default)
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.value(key)?;
        if !v.is_finite() {
            return Err(self.err_at(key, "value must be finite"));
        }
        Ok(v)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.contains(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        parse_list(self.str(key)?).map_err(|m| self.err_at(key, &m))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let s = self.str(key)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.err_at(key, "expected comma separated integers"))
    }

    pub fn f64_nested(&self, key: &str) -> Result<Vec<Vec<f64>>> {
        self.str(key)?
            .split(';')
            .map(parse_list)
            .collect::<std::result::Result<_, _>>()
            .map_err(|m| self.err_at(key, &m))
    }

    /// Renders entries in key order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (_, v))| format!("{k} = {v}\n"))
            .collect()
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let out: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected comma separated numbers, got '{s}'"))?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let m = KvMap::parse("# header\na = 1.5 # trailing\n\nb=1,2, 3\nc = 1,2;3,4\n").unwrap();
        assert_eq!(m.f64("a").unwrap(), 1.5);
        assert_eq!(m.f64_list("b").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(m.f64_nested("c").unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.line("b"), 4);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvMap::parse("novalue\n").is_err());
        assert!(KvMap::parse("a = 1\na = 2\n").is_err());
        assert!(KvMap::parse(" = 3\n").is_err());
        let m = KvMap::parse("a = x\nb = nan\n").unwrap();
        assert!(m.f64("a").is_err());
        assert!(m.f64("b").is_err());
        assert!(m.f64("missing").is_err());
    }
}
