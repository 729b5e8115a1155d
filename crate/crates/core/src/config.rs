//! Flat `key = value` configuration text with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    /// key -> (value, 1-based line)
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                detail: format!("expected `key = value`, found {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config { line, detail: "empty key".into() });
            }
            if entries.insert(k.to_string(), (v.to_string(), line)).is_some() {
                return Err(Error::Config { line, detail: format!("duplicate key {k:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Config {
                line: *line,
                detail: format!("{key} = {v:?}: {e}"),
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (_, line))) => Err(Error::Config {
                line: *line,
                detail: format!("unknown key {k:?}"),
            }),
            None => Ok(()),
        }
    }

    /// Canonical text: one `key = value` per line in key order.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let kv = KvConfig::parse("# header\nsteps = 30  # inline\n\nlr=1e-4\n").unwrap();
        assert_eq!(kv.get::<usize>("steps").unwrap(), Some(30));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(1e-4));
        assert!(matches!(kv.get::<usize>("lr"), Err(Error::Config { line: 4, .. })));
        assert!(matches!(kv.reject_unknown(&["steps"]), Err(Error::Config { line: 4, .. })));
        assert!(matches!(KvConfig::parse("a = 1\nnonsense\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(KvConfig::parse("a = 1\na = 2\n"), Err(Error::Config { line: 2, .. })));
        assert_eq!(KvConfig::parse(&kv.render()).unwrap().render(), kv.render());
    }
}
