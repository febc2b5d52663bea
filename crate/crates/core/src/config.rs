//! `key = value` configuration text with `[section]` headers and `#`
//! comments. Sections may repeat (a scene has one `[track]` per track), so
//! they are kept as an ordered list.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Section {
            name: name.to_string(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    /// Parses `key` if present.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Config {
                line: e.line,
                msg: format!("bad value {:?} for {key}: {err}", e.value),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| Error::Config {
            line: self.line,
            msg: format!("[{}] is missing required key {key:?}", self.name),
        })
    }

    /// Rejects keys outside `known`, which catches typos in hand-written files.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for e in &self.entries {
            if !known.contains(&e.key.as_str()) {
                return Err(Error::Config {
                    line: e.line,
                    msg: format!("unknown key {:?} in [{}]", e.key, self.name),
                });
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line: 0,
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub sections: Vec<Section>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = vec![Section::new("")];
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
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line: line_no,
                    msg: format!("unterminated section header {line:?}"),
                })?;
                let mut s = Section::new(name.trim());
                s.line = line_no;
                sections.push(s);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            sections.last_mut().unwrap().entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line: line_no,
            });
        }
        if sections[0].entries.is_empty() {
            sections.remove(0);
        }
        Ok(Config { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !s.name.is_empty() {
                let _ = writeln!(out, "[{}]", s.name);
            }
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_repeats() {
        let text = "# scene\nseed = 3\n[track]\nspeed_kmh = 60 # fast\n\n[track]\nspeed_kmh=30\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.sections.len(), 3);
        assert_eq!(cfg.sections[0].require::<u64>("seed").unwrap(), 3);
        let speeds: Vec<f64> = cfg
            .sections_named("track")
            .map(|s| s.require("speed_kmh").unwrap())
            .collect();
        assert_eq!(speeds, vec![60.0, 30.0]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = Config::parse("a = 1\nnonsense\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let cfg = Config::parse("[s]\nx = abc\n").unwrap();
        let err = cfg.sections[0].require::<f64>("x").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
    }

    #[test]
    fn render_parses_back() {
        let mut s = Section::new("train");
        s.set("epochs", 5);
        s.set("lr", 0.001);
        let cfg = Config { sections: vec![s] };
        assert_eq!(Config::parse(&cfg.render()).unwrap().sections[0].entries.len(), 2);
    }
}
