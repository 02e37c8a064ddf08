//! Corpus records and JSONL I/O.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cwe::CweId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{origin}:{line}: {msg}")]
    Line {
        origin: String,
        line: usize,
        msg: String,
    },
    #[error("{origin}: {source}")]
    Io {
        origin: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Vulnerable,
    Safe,
}

impl Label {
    pub fn is_vulnerable(self) -> bool {
        self == Label::Vulnerable
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Vulnerable => "vulnerable",
            Label::Safe => "safe",
        })
    }
}

/// One labelled C sample. `cwe` is the weakness class the sample belongs to;
/// safe samples may carry it as grouping metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub code: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<CweId>,
    #[serde(default)]
    pub source: String,
}

/// Parses one JSON value per non-blank line. Errors carry the 1-based line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| CorpusError::Line {
            origin: origin.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        origin: origin.clone(),
        source,
    })?;
    parse_jsonl(&text, &origin)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable record"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    std::fs::write(path, to_jsonl(items)).map_err(|source| CorpusError::Io {
        origin: path.display().to_string(),
        source,
    })
}

/// Reads a corpus and checks ids are unique and vulnerable samples name a CWE.
pub fn read_corpus(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    validate_corpus(&samples)?;
    Ok(samples)
}

pub fn validate_corpus(samples: &[Sample]) -> Result<(), CorpusError> {
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(CorpusError::Invalid(format!("duplicate sample id `{}`", s.id)));
        }
        if s.label.is_vulnerable() && s.cwe.is_none() {
            return Err(CorpusError::Invalid(format!(
                "vulnerable sample `{}` has no cwe",
                s.id
            )));
        }
    }
    Ok(())
}
