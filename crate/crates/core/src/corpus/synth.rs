//! Synthetic corpora with planted difficulty signals.
//!
//! A problem's class is written into one or more carriers:
//! * code: the solution nests `level + 1` `for` loops (straight-line code
//!   carries no signal),
//! * statement: the sentence `it is guaranteed that n <= B` with a bound `B`
//!   that grows with the level (a neutral sentence carries no signal),
//! * features: time and memory limits chosen by level.
//!
//! With [`SignalSplit::Both`], half of each class is carried by code and the
//! other half by the statement, so neither modality alone recovers every label.

use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{strip_comments, Corpus, Problem};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSplit {
    CodeOnly,
    TextOnly,
    Both,
    FeaturesOnly,
}

impl FromStr for SignalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code_only" | "code" => Ok(Self::CodeOnly),
            "text_only" | "text" => Ok(Self::TextOnly),
            "both" => Ok(Self::Both),
            "features_only" | "features" => Ok(Self::FeaturesOnly),
            _ => Err(Error::config(format!(
                "unknown signal split {s:?} (expected code_only, text_only, both or features_only)"
            ))),
        }
    }
}

const FIXED_STATEMENT: &str =
    "You are given an array of n integers. Compute the required value and print the answer.";

const OPENERS: &[&str] = &[
    "Alice has",
    "Bob is given",
    "A chef owns",
    "There are",
    "You are given",
    "Little Petya found",
];
const OBJECTS: &[&str] = &[
    "an array of n integers",
    "a string of length n",
    "a tree with n vertices",
    "n boxes on a shelf",
    "a grid with n rows",
    "n cities connected by roads",
];
const TASKS: &[&str] = &[
    "Find the maximum possible sum.",
    "Count the number of good pairs.",
    "Print the minimum total cost.",
    "Determine whether it is possible.",
    "Output the lexicographically smallest answer.",
];
const NEUTRAL: &str = "The value of n is given in the first line.";
const TAGS: &[&str] = &[
    "brute force",
    "dp",
    "graphs",
    "greedy",
    "implementation",
    "math",
    "sortings",
    "strings",
];
const LOOP_VARS: &[&str] = &["i", "j", "k", "a", "b", "c", "d", "e"];

fn bound_for(level: usize) -> String {
    format!("1{}", "0".repeat(2 + 2 * level))
}

fn time_for(level: usize) -> u64 {
    1000 * (level as u64 + 1)
}

fn memory_for(level: usize) -> u64 {
    65_536 << level.min(16)
}

fn statement(rng: &mut ChaCha8Rng, level: Option<usize>) -> String {
    let constraint = match level {
        Some(l) => format!("It is guaranteed that n ≤ {}.", bound_for(l)),
        None => NEUTRAL.to_string(),
    };
    format!(
        "{} {}. {} {}",
        OPENERS.choose(rng).expect("non-empty"),
        OBJECTS.choose(rng).expect("non-empty"),
        constraint,
        TASKS.choose(rng).expect("non-empty"),
    )
}

fn straight_line(rng: &mut ChaCha8Rng) -> &'static str {
    [
        "s += n / 2;",
        "s = s * 3 + 1;",
        "if (n % 2 == 0) s++;",
        "s -= n;",
        "s = n * (n + 1) / 2;",
    ]
    .choose(rng)
    .expect("non-empty")
}

fn code(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let mut out = String::from("long long solve(int n) {\n    long long s = 0;\n");
    if rng.random_bool(0.3) {
        out.push_str("    // read input\n");
    }
    if depth == 0 {
        for _ in 0..rng.random_range(1..=3) {
            out.push_str("    ");
            out.push_str(straight_line(rng));
            out.push('\n');
        }
    } else {
        if rng.random_bool(0.5) {
            out.push_str("    ");
            out.push_str(straight_line(rng));
            out.push('\n');
        }
        for d in 0..depth {
            let v = LOOP_VARS[d % LOOP_VARS.len()];
            out.push_str(&"    ".repeat(d + 1));
            out.push_str(&format!("for (int {v} = 0; {v} < n; {v}++) {{\n"));
        }
        let inner = LOOP_VARS[(depth - 1) % LOOP_VARS.len()];
        let body = match rng.random_range(0..3) {
            0 => format!("s += {inner};"),
            1 => format!("s ^= {inner} * 7;"),
            _ => format!("s = (s + {inner}) % 1000;"),
        };
        out.push_str(&"    ".repeat(depth + 1));
        out.push_str(&body);
        out.push('\n');
        for d in (0..depth).rev() {
            out.push_str(&"    ".repeat(d + 1));
            out.push_str("}\n");
        }
    }
    out.push_str("    return s;\n}\n");
    out
}

/// Emits `n` problems over `k` classes with per-class counts within one of
/// each other. Deterministic in `(n, k, seed, split)`.
pub fn generate_synthetic(n: usize, k: usize, seed: u64, split: SignalSplit) -> Result<Corpus> {
    if k < 2 {
        return Err(Error::config("synthetic corpus needs at least 2 classes"));
    }
    if n < 10 * k {
        return Err(Error::config(format!("need n >= 10*K = {}, got {n}", 10 * k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut seen_per_class = vec![0usize; k];
    let mut problems = Vec::with_capacity(n);
    for (i, &level) in labels.iter().enumerate() {
        let ordinal = seen_per_class[level];
        seen_per_class[level] += 1;
        let (in_code, in_text, in_features) = match split {
            SignalSplit::CodeOnly => (true, false, false),
            SignalSplit::TextOnly => (false, true, false),
            SignalSplit::FeaturesOnly => (false, false, true),
            SignalSplit::Both => (ordinal.is_multiple_of(2), ordinal % 2 == 1, false),
        };
        let statement = match split {
            SignalSplit::CodeOnly => FIXED_STATEMENT.to_string(),
            _ => statement(&mut rng, in_text.then_some(level)),
        };
        let code = code(&mut rng, if in_code { level + 1 } else { 0 });
        let (time, memory) = if in_features {
            (time_for(level), memory_for(level))
        } else {
            (
                time_for(rng.random_range(0..k)),
                memory_for(rng.random_range(0..k)),
            )
        };
        let num_tags = rng.random_range(1..=2);
        let mut tags: Vec<String> = TAGS
            .choose_multiple(&mut rng, num_tags)
            .map(|s| s.to_string())
            .collect();
        tags.sort();
        problems.push(Problem {
            id: format!("syn-{i:06}"),
            statement,
            code,
            time_limit_ms: time,
            memory_limit_kb: memory,
            io_size_bytes: rng.random_range(10..10_000),
            category_tags: tags,
            difficulty: level,
        });
    }
    Corpus::new(problems, k)
}

fn max_for_depth(code: &str) -> usize {
    let code = strip_comments(code);
    let mut stack: Vec<bool> = Vec::new();
    let mut pending_for = false;
    let (mut depth, mut best) = (0usize, 0usize);
    let words: Vec<&str> = code
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '{' || c == '}'))
        .collect();
    for w in words {
        for part in split_braces(w) {
            match part {
                "for" => pending_for = true,
                "{" => {
                    stack.push(pending_for);
                    if pending_for {
                        depth += 1;
                        best = best.max(depth);
                    }
                    pending_for = false;
                }
                "}"
                    if stack.pop() == Some(true) => {
                        depth -= 1;
                    }
                _ => {}
            }
        }
    }
    best
}

fn split_braces(w: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    for (i, c) in w.char_indices() {
        if c == '{' || c == '}' {
            if start < i {
                parts.push(&w[start..i]);
            }
            parts.push(&w[i..i + 1]);
            start = i + 1;
        }
    }
    if start < w.len() {
        parts.push(&w[start..]);
    }
    parts
}

/// Recovers the class planted by [`generate_synthetic`] by reading the
/// carriers directly: `for`-nesting depth, the `n <= B` bound, or the time
/// limit. `None` when no carrier holds a signal.
pub fn read_planted_label(p: &Problem, k: usize, split: SignalSplit) -> Option<usize> {
    let from_code = || max_for_depth(&p.code).checked_sub(1);
    let from_text = || {
        (0..k).find(|&l| {
            let b = bound_for(l);
            p.statement.contains(&format!("≤ {b}.")) || p.statement.contains(&format!("<= {b}."))
        })
    };
    match split {
        SignalSplit::CodeOnly => from_code(),
        SignalSplit::TextOnly => from_text(),
        SignalSplit::Both => from_code().or_else(from_text),
        SignalSplit::FeaturesOnly => (0..k).find(|&l| time_for(l) == p.time_limit_ms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_classes() {
        let c = generate_synthetic(600, 3, 1, SignalSplit::Both).unwrap();
        assert_eq!(c.len(), 600);
        assert_eq!(c.class_counts(), vec![200, 200, 200]);
        let c = generate_synthetic(101, 4, 2, SignalSplit::CodeOnly).unwrap();
        let counts = c.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn code_only_statements_are_constant() {
        let c = generate_synthetic(60, 3, 5, SignalSplit::CodeOnly).unwrap();
        assert!(c.problems.iter().all(|p| p.statement == FIXED_STATEMENT));
    }

    #[test]
    fn too_small_n_rejected() {
        assert!(generate_synthetic(29, 3, 1, SignalSplit::Both).is_err());
    }

    #[test]
    fn byte_identical_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        generate_synthetic(90, 3, 42, SignalSplit::Both).unwrap().write_jsonl(&a).unwrap();
        generate_synthetic(90, 3, 42, SignalSplit::Both).unwrap().write_jsonl(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn rule_reader_recovers_every_label() {
        for split in [
            SignalSplit::Both,
            SignalSplit::CodeOnly,
            SignalSplit::TextOnly,
            SignalSplit::FeaturesOnly,
        ] {
            for k in [2, 3, 5] {
                let c = generate_synthetic(50 * k, k, 7, split).unwrap();
                for p in &c.problems {
                    assert_eq!(read_planted_label(p, k, split), Some(p.difficulty), "{split:?} {p:?}");
                }
            }
        }
    }

    #[test]
    fn both_split_needs_both_modalities() {
        let c = generate_synthetic(300, 3, 3, SignalSplit::Both).unwrap();
        let code_hits = c
            .problems
            .iter()
            .filter(|p| read_planted_label(p, 3, SignalSplit::CodeOnly) == Some(p.difficulty))
            .count();
        let text_hits = c
            .problems
            .iter()
            .filter(|p| read_planted_label(p, 3, SignalSplit::TextOnly) == Some(p.difficulty))
            .count();
        assert_eq!(code_hits, 150);
        assert_eq!(text_hits, 150);
    }
}
