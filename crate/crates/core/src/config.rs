//! Plain `key = value` config files with optional `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keys outside any `[section]` live in the section named `""`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", i + 1)))?;
                current = name.trim().to_string();
                cfg.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.sections.entry(current.clone()).or_default().insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> Section<'_> {
        Section { name: name.to_string(), values: self.sections.get(name) }
    }

    pub fn section_names(&self) -> impl Iterator<Item = &String> {
        self.sections.keys()
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    /// Canonical text form: sections sorted by name, keys sorted within.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, kv) in &self.sections {
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

pub struct Section<'a> {
    name: String,
    values: Option<&'a BTreeMap<String, String>>,
}

impl Section<'_> {
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.and_then(|m| m.get(key)) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("[{}] {key}: cannot parse '{v}'", self.name))),
        }
    }

    /// Overwrites `target` when the key is present.
    pub fn read<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.and_then(|m| m.get(key)).map(String::as_str)
    }

    /// Fails on any key not listed in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        if let Some(m) = self.values {
            for k in m.keys() {
                if !known.contains(&k.as_str()) {
                    return Err(Error::Config(format!("[{}] unknown key '{k}'", self.name)));
                }
            }
        }
        Ok(())
    }
}
