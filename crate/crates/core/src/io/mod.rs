//! Text records, run configs and binary checkpoints.
//!
//! Records are the one text format used for configs and reports:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Keys are unique within a section, section names are unique, values are
//! everything after the first `=` with surrounding whitespace trimmed.

mod checkpoint;
mod config;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_entries, save_checkpoint, save_checkpoint_as, CheckpointEntry, CheckpointError, Dtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_config, RunConfig, ScheduleConfig, TaskConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl RecordError {
    pub fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based source line, 0 for entries built in memory.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    fn line_of(&self, key: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| e.line)
            .filter(|&l| l > 0)
    }

    pub fn error(&self, key: &str, message: impl fmt::Display) -> RecordError {
        RecordError::new(self.line_of(key), format!("[{}] {key}: {message}", self.name))
    }

    /// Sets or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => self.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
        self
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
    }

    pub fn get_str(&self, key: &str) -> Result<&str, RecordError> {
        self.value(key)
            .ok_or_else(|| RecordError::new(Some(self.line).filter(|&l| l > 0), format!("[{}] missing key {key}", self.name)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, RecordError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get_str(key)?;
        raw.parse().map_err(|e| self.error(key, format!("cannot parse {raw:?}: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Record {
    pub sections: Vec<Section>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    /// Section `name`, created at the end if missing.
    pub fn section(&mut self, name: &str) -> &mut Section {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            return &mut self.sections[i];
        }
        self.sections.push(Section {
            name: name.to_string(),
            line: 0,
            entries: Vec::new(),
        });
        self.sections.last_mut().unwrap()
    }

    pub fn get_section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require_section(&self, name: &str) -> Result<&Section, RecordError> {
        self.get_section(name)
            .ok_or_else(|| RecordError::new(None, format!("missing section [{name}]")))
    }

    pub fn parse(text: &str) -> Result<Self, RecordError> {
        let mut rec = Record::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| RecordError::new(Some(line), format!("malformed section header {s:?}")))?;
                if rec.get_section(name).is_some() {
                    return Err(RecordError::new(Some(line), format!("duplicate section [{name}]")));
                }
                rec.sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| RecordError::new(Some(line), format!("expected key = value, got {s:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(RecordError::new(Some(line), "empty key"));
            }
            let Some(section) = rec.sections.last_mut() else {
                return Err(RecordError::new(Some(line), format!("key {key:?} outside of any section")));
            };
            if section.value(key).is_some() {
                return Err(RecordError::new(Some(line), format!("duplicate key {key:?} in [{}]", section.name)));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(rec)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{}]", s.name)?;
            for e in &s.entries {
                writeln!(f, "{} = {}", e.key, e.value)?;
            }
        }
        Ok(())
    }
}

/// Fixed-point text with 9 significant digits; scientific notation outside
/// `[1e-6, 1e12)`.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-6..12).contains(&mag) {
        return format!("{:.*e}", (SIG - 1) as usize, x);
    }
    let decimals = (SIG - 1 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new digit (9.999999999 -> 10.00000000)
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    let significant = digits.trim_start_matches('0').len();
    if decimals > 0 && significant > SIG as usize {
        format!("{x:.*}", decimals - 1)
    } else {
        s
    }
}
