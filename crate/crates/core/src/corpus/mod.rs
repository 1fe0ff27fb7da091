//! Problems, corpora, JSONL ingestion and preprocessing.

mod folds;
mod preprocess;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldPlan, NUM_FOLDS};
pub use preprocess::{
    preprocess_statement, strip_comments, PreprocessConfig, DEFAULT_STOPWORDS, DEFAULT_SYMBOL_MAP,
};
pub use synth::{generate_synthetic, read_planted_label, SignalSplit};

/// Statements longer than this (in characters, after preprocessing) are
/// treated as abnormal samples and dropped.
pub const MAX_STATEMENT_CHARS: usize = 20_000;

/// One programming problem: statement, a solution, operational attributes and
/// its difficulty class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub code: String,
    pub time_limit_ms: u64,
    pub memory_limit_kb: u64,
    pub io_size_bytes: u64,
    #[serde(rename = "tags", default)]
    pub category_tags: Vec<String>,
    pub difficulty: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub problems: Vec<Problem>,
    pub num_classes: usize,
    pub tag_vocab: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub accepted: usize,
    /// `(line number, reason)` for each rejected line.
    pub rejected: Vec<(usize, String)>,
}

impl Corpus {
    /// Validates labels and collects the tag vocabulary.
    pub fn new(problems: Vec<Problem>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(p) = problems.iter().find(|p| p.difficulty >= num_classes) {
            return Err(Error::invalid(format!(
                "problem {} has difficulty {} outside [0, {num_classes})",
                p.id, p.difficulty
            )));
        }
        let tag_vocab = problems
            .iter()
            .flat_map(|p| p.category_tags.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            problems,
            num_classes,
            tag_vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.problems.iter().map(|p| p.difficulty).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for p in &self.problems {
            counts[p.difficulty] += 1;
        }
        counts
    }

    /// Corpus restricted to the given problem indices; keeps K and the tag
    /// vocabulary of the parent.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            problems: indices.iter().map(|&i| self.problems[i].clone()).collect(),
            num_classes: self.num_classes,
            tag_vocab: self.tag_vocab.clone(),
        }
    }

    /// Applies statement normalization and comment stripping, dropping
    /// abnormal samples. Returns the cleaned corpus and the dropped ids.
    pub fn preprocess(&self, cfg: &PreprocessConfig) -> (Corpus, Vec<String>) {
        let mut kept = Vec::with_capacity(self.problems.len());
        let mut dropped = Vec::new();
        for p in &self.problems {
            let statement = preprocess_statement(&p.statement, cfg);
            let code = strip_comments(&p.code);
            if statement.is_empty()
                || code.trim().is_empty()
                || statement.chars().count() > MAX_STATEMENT_CHARS
            {
                dropped.push(p.id.clone());
                continue;
            }
            kept.push(Problem {
                statement,
                code,
                ..p.clone()
            });
        }
        if !dropped.is_empty() {
            warn!("dropped {} abnormal problems during preprocessing", dropped.len());
        }
        let corpus = Corpus {
            problems: kept,
            num_classes: self.num_classes,
            tag_vocab: self.tag_vocab.clone(),
        };
        (corpus, dropped)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for p in &self.problems {
            serde_json::to_writer(&mut out, p)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSONL corpus. Lines that fail to parse, carry an out-of-range
/// label, repeat an id or have an empty statement/code are rejected and
/// reported; zero accepted lines is an error.
pub fn load_corpus(path: &Path, num_classes: usize) -> Result<(Corpus, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let reason = match serde_json::from_str::<Problem>(line) {
            Err(e) => Some(format!("parse error: {e}")),
            Ok(p) if p.difficulty >= num_classes => Some(format!(
                "difficulty {} outside [0, {num_classes})",
                p.difficulty
            )),
            Ok(p) if p.statement.trim().is_empty() || p.code.trim().is_empty() => {
                Some("empty statement or code".to_string())
            }
            Ok(p) if !seen.insert(p.id.clone()) => Some(format!("duplicate id {:?}", p.id)),
            Ok(p) => {
                problems.push(p);
                None
            }
        };
        if let Some(reason) = reason {
            warn!("{}:{lineno}: rejected: {reason}", path.display());
            report.rejected.push((lineno, reason));
        }
    }
    report.accepted = problems.len();
    if problems.is_empty() {
        return Err(Error::Parse {
            path: PathBuf::from(path),
            line: 0,
            message: "zero valid lines".to_string(),
        });
    }
    Ok((Corpus::new(problems, num_classes)?, report))
}
