use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{lex_code, tokenize_text};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const XCLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const UNK: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[XCLS]", "[SEP]", "[MASK]", "[UNK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Text,
    Code,
}

/// Word-level vocabulary with six reserved entries at ids 0..=5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from token counts: drops tokens seen fewer than `min_freq`
    /// times, orders by descending count then lexicographically, and keeps
    /// at most `max_size` non-reserved entries.
    pub fn from_counts(counts: HashMap<String, usize>, min_freq: usize, max_size: usize) -> Self {
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size);
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix and distinct tokens")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary does not start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// Token strings of one side of a problem, as the encoders see them.
pub fn side_tokens(p: &crate::corpus::Problem, side: Side) -> Vec<String> {
    match side {
        Side::Text => tokenize_text(&p.statement),
        Side::Code => lex_code(&p.code).into_iter().map(|t| t.text).collect(),
    }
}

pub fn build_vocab(corpus: &Corpus, side: Side, min_freq: usize, max_size: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in &corpus.problems {
        for t in side_tokens(p, side) {
            *counts.entry(t).or_default() += 1;
        }
    }
    Vocab::from_counts(counts, min_freq.max(1), max_size)
}
