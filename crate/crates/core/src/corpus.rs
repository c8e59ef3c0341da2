//! Report preprocessing, vocabulary construction, tokenization, view
//! filtering, and dataset file I/O.
//!
//! Dataset files are UTF-8 JSONL, one record per line:
//! `{"id": "...", "view": "AP"|"PA"|"<other>", "embedding": [f32 × clip_dim], "report": "..."}`
//!
//! Vocabulary files hold one token per line; line number = id − 4 (ids 0..3
//! are reserved for PAD/BOS/EOS/UNK).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;

/// Chest X-ray projection label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum View {
    Ap,
    Pa,
    Other(String),
}

impl View {
    pub fn parse(s: &str) -> View {
        match s {
            "AP" => View::Ap,
            "PA" => View::Pa,
            other => View::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            View::Ap => "AP",
            View::Pa => "PA",
            View::Other(s) => s,
        }
    }
}

/// One (embedding, report) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub view: View,
    pub embedding: Vec<f32>,
    pub report: String,
}

#[derive(Clone, Debug, Default)]
pub struct SplitSet {
    pub train: Vec<EmbeddingRecord>,
    pub val: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

/// Lowercase, strip everything outside `[a-z0-9 .]` (whitespace becomes a
/// space first), collapse space runs, trim.
pub fn preprocess_report(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    for c in raw.to_lowercase().chars() {
        if c.is_whitespace() {
            out.push(' ');
        } else if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '.' {
            out.push(c);
        }
    }
    let cleaned = out.split_whitespace().collect::<Vec<_>>().join(" ");
    if cleaned.is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(cleaned)
}

/// Keep AP/PA records only and deduplicate by id (first occurrence wins).
pub fn filter_views(records: Vec<EmbeddingRecord>) -> Vec<EmbeddingRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| matches!(r.view, View::Ap | View::Pa))
        .filter(|r| seen.insert(r.id.clone()))
        .collect()
}

/// Token ↔ id bijection with reserved PAD/BOS/EOS/UNK ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from whitespace tokens with frequency >= min_freq, ordered by
    /// (descending frequency, lexicographic) for deterministic ids.
    pub fn build<S: AsRef<str>>(reports: &[S], min_freq: usize) -> Result<Vocabulary> {
        if reports.is_empty() {
            return Err(Error::InvalidCorpus("empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for r in reports {
            for tok in r.as_ref().split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(_, n)| *n >= min_freq)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Vocabulary::from_tokens(
            entries.into_iter().map(|(t, _)| t.to_string()).collect(),
        ))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Total id count including the four reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        if id < RESERVED {
            None
        } else {
            self.tokens.get(id - RESERVED).map(|s| s.as_str())
        }
    }

    /// BOS + token ids (UNK for OOV) + EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(text.split_whitespace().map(|t| self.id_of(t)));
        ids.push(EOS_ID);
        ids
    }

    /// Strip reserved ids and join with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| self.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        Ok(Vocabulary::from_tokens(
            text.lines().map(|l| l.to_string()).collect(),
        ))
    }

    /// Rebuild the token index (needed after serde deserialization).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    view: String,
    embedding: Vec<f32>,
    report: String,
}

/// Load one split file: parse, preprocess, view-filter.
pub fn load_records(path: &Path, clip_dim: usize) -> Result<Vec<EmbeddingRecord>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if raw.embedding.len() != clip_dim {
            return Err(Error::Dimension {
                op: format!("load_records line {}", lineno + 1),
                lhs: vec![raw.embedding.len()],
                rhs: vec![clip_dim],
            });
        }
        let report = preprocess_report(&raw.report).map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: "report empty after preprocessing".into(),
        })?;
        records.push(EmbeddingRecord {
            id: raw.id,
            view: View::parse(&raw.view),
            embedding: raw.embedding,
            report,
        });
    }
    Ok(filter_views(records))
}

pub fn save_records(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            view: r.view.as_str().to_string(),
            embedding: r.embedding.clone(),
            report: r.report.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&raw)?)?;
    }
    Ok(())
}

/// A dataset directory holds train.jsonl, val.jsonl, test.jsonl.
pub fn load_dataset(dir: &Path, clip_dim: usize) -> Result<SplitSet> {
    Ok(SplitSet {
        train: load_records(&dir.join("train.jsonl"), clip_dim)?,
        val: load_records(&dir.join("val.jsonl"), clip_dim)?,
        test: load_records(&dir.join("test.jsonl"), clip_dim)?,
    })
}

pub fn save_dataset(split: &SplitSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_records(&split.train, &dir.join("train.jsonl"))?;
    save_records(&split.val, &dir.join("val.jsonl"))?;
    save_records(&split.test, &dir.join("test.jsonl"))?;
    Ok(())
}
