//! The `key = value` ASCII dialect shared by metadata, parameter, config and
//! manifest files.
//!
//! One entry per line, newline-terminated. Blank lines and lines starting
//! with `#` are ignored on read. Keys are bare identifiers; values run to the
//! end of the line with surrounding whitespace trimmed. Keys may repeat (the
//! manifest uses one `file` entry per copied file).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyValError {
    #[error("line {line}: malformed entry {text:?} (expected `key = value`)")]
    Malformed { line: usize, text: String },
    #[error("missing key `{key}`")]
    MissingKey { key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// 1-based line number in the source text (0 for entries built in memory).
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// An ordered list of entries, as read from or about to be written to a file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValDoc {
    entries: Vec<Entry>,
}

impl KeyValDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KeyValError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(KeyValError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(KeyValError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            }
            entries.push(Entry {
                line,
                key: key.to_string(),
                value: value.trim().to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push(Entry {
            line: 0,
            key: key.to_string(),
            value: value.to_string(),
        });
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    /// The single entry for `key`; repeated keys are rejected.
    pub fn get<'a>(&'a self, key: &'a str) -> Result<Option<&'a Entry>, KeyValError> {
        let mut found = None;
        for e in self.all(key) {
            if found.is_some() {
                return Err(KeyValError::DuplicateKey {
                    line: e.line,
                    key: key.to_string(),
                });
            }
            found = Some(e);
        }
        Ok(found)
    }

    pub fn require<'a>(&'a self, key: &'a str) -> Result<&'a Entry, KeyValError> {
        self.get(key)?.ok_or_else(|| KeyValError::MissingKey {
            key: key.to_string(),
        })
    }

    pub fn require_parsed<T>(&self, key: &str) -> Result<T, KeyValError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.require(key)?.parse()
    }

    pub fn get_parsed<T>(&self, key: &str) -> Result<Option<T>, KeyValError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)?.map(Entry::parse).transpose()
    }

    /// Rejects any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), KeyValError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(KeyValError::UnknownKey {
                line: e.line,
                key: e.key.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        out
    }
}

impl Entry {
    pub fn parse<T>(&self) -> Result<T, KeyValError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.value.parse().map_err(|err: T::Err| self.invalid(err))
    }

    pub fn invalid(&self, reason: impl fmt::Display) -> KeyValError {
        KeyValError::InvalidValue {
            line: self.line,
            key: self.key.clone(),
            value: self.value.clone(),
            reason: reason.to_string(),
        }
    }
}

/// Formats a real with shortest round-trip precision, always with a decimal
/// point or exponent (`0.0`, `0.125`, `1e-7`).
pub fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}
