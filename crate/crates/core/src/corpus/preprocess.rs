use log::warn;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Symbols rewritten to ASCII before tokenization. Operators are padded with
/// spaces so they become separate words.
pub const DEFAULT_SYMBOL_MAP: &[(&str, &str)] = &[
    ("≤", " <= "),
    ("≥", " >= "),
    ("≠", " != "),
    ("×", " * "),
    ("·", " * "),
    ("⋅", " * "),
    ("−", "-"),
    ("–", "-"),
    ("\u{2014}", "-"),
    ("‘", "'"),
    ("’", "'"),
    ("“", "\""),
    ("”", "\""),
];

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub symbol_map: Vec<(String, String)>,
    pub remove_stopwords: bool,
    pub stopwords: Vec<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            symbol_map: DEFAULT_SYMBOL_MAP
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            remove_stopwords: false,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn normalize_case(raw: &str) -> String {
    // NFKC can introduce capitals and lowercasing can denormalize, so repeat
    // until stable; two rounds suffice in practice.
    let mut cur: String = raw.nfkc().collect::<String>().to_lowercase();
    for _ in 0..4 {
        let next: String = cur.nfkc().collect::<String>().to_lowercase();
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Compatibility-normalizes, maps symbols to ASCII, lowercases, optionally
/// drops stopwords and collapses whitespace.
pub fn preprocess_statement(raw: &str, cfg: &PreprocessConfig) -> String {
    let mut text = normalize_case(raw);
    for (from, to) in &cfg.symbol_map {
        if !from.is_empty() && text.contains(from.as_str()) {
            text = text.replace(from.as_str(), to);
        }
    }
    let words = text.split_whitespace();
    if cfg.remove_stopwords {
        words
            .filter(|w| !cfg.stopwords.iter().any(|s| s == w))
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        words.collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Code,
    Str,
    Chr,
    LineComment,
    BlockComment,
}

/// Removes `//` and `/* */` comments from C-family source. String and char
/// literals are left alone, newlines inside block comments are kept so line
/// structure survives, and an unterminated block comment runs to the end.
pub fn strip_comments(code: &str) -> String {
    let chars: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut state = State::Code;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match state {
            State::Code => match (c, next) {
                ('/', Some('/')) => {
                    state = State::LineComment;
                    i += 2;
                    continue;
                }
                ('/', Some('*')) => {
                    state = State::BlockComment;
                    i += 2;
                    continue;
                }
                ('"', _) => {
                    state = State::Str;
                    out.push(c);
                }
                ('\'', _) => {
                    state = State::Chr;
                    out.push(c);
                }
                _ => out.push(c),
            },
            State::Str | State::Chr => {
                let close = if state == State::Str { '"' } else { '\'' };
                out.push(c);
                if c == '\\' {
                    if let Some(n) = next {
                        if n != '\n' {
                            out.push(n);
                            i += 2;
                            continue;
                        }
                    }
                } else if c == close || c == '\n' {
                    // a newline ends an unterminated literal
                    state = State::Code;
                }
            }
            State::LineComment => {
                if c == '\n' {
                    out.push(c);
                    state = State::Code;
                }
            }
            State::BlockComment => {
                if c == '*' && next == Some('/') {
                    state = State::Code;
                    i += 2;
                    continue;
                }
                if c == '\n' {
                    out.push(c);
                }
            }
        }
        i += 1;
    }
    if state == State::BlockComment {
        warn!("unterminated block comment; stripped to end of input");
    }
    out
}
