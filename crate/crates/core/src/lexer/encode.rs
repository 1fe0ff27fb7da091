use super::vocab::{CLS, PAD, SEP, XCLS};
use super::{lex_code, tokenize_text, TokenType, Vocab};
use crate::corpus::Problem;
use crate::error::{Error, Result};

/// Fixed-length model input laid out as `[CLS, xCLS, t1 .. tr, SEP, PAD ..]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    pub attn_mask: Vec<u8>,
    /// Number of real tokens `r` (specials and padding excluded).
    pub real_len: usize,
}

/// Positions `0` and `1` hold CLS and xCLS; real tokens start here.
pub const FIRST_TOKEN: usize = 2;

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Positions up to and including SEP.
    pub fn used_len(&self) -> usize {
        self.real_len + 3
    }

    /// Positions of real tokens: `2 .. 2 + real_len`.
    pub fn token_positions(&self) -> std::ops::Range<usize> {
        FIRST_TOKEN..FIRST_TOKEN + self.real_len
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.ids[self.token_positions()]
    }
}

/// Encodes a token sequence. `types` supplies the type channel for code;
/// when absent every position is [`TokenType::Special`].
pub fn encode(
    tokens: &[String],
    types: Option<&[TokenType]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence> {
    if max_len < 4 {
        return Err(Error::config(format!(
            "layout does not fit: max_len {max_len} < 4 ([CLS] [XCLS] token [SEP])"
        )));
    }
    if let Some(t) = types {
        if t.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} token types for {} tokens",
                t.len(),
                tokens.len()
            )));
        }
    }
    let real_len = tokens.len().min(max_len - 3);
    let special = TokenType::Special.index() as u8;
    let mut ids = Vec::with_capacity(max_len);
    let mut type_ids = Vec::with_capacity(max_len);
    ids.extend([CLS, XCLS]);
    type_ids.extend([special, special]);
    for (i, tok) in tokens.iter().take(real_len).enumerate() {
        ids.push(vocab.id(tok));
        type_ids.push(types.map_or(special, |t| t[i].index() as u8));
    }
    ids.push(SEP);
    type_ids.push(special);
    let mut attn_mask = vec![1u8; ids.len()];
    ids.resize(max_len, PAD);
    type_ids.resize(max_len, special);
    attn_mask.resize(max_len, 0);
    Ok(EncodedSequence {
        ids,
        type_ids,
        attn_mask,
        real_len,
    })
}

pub fn encode_code(code: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    let (texts, types): (Vec<String>, Vec<TokenType>) =
        lex_code(code).into_iter().map(|t| (t.text, t.ttype)).unzip();
    encode(&texts, Some(&types), vocab, max_len)
}

pub fn encode_text(statement: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    encode(&tokenize_text(statement), None, vocab, max_len)
}

/// Both sequences of a problem: `(code, text)`.
pub fn encode_problem(
    p: &Problem,
    code_vocab: &Vocab,
    text_vocab: &Vocab,
    code_max_len: usize,
    text_max_len: usize,
) -> Result<(EncodedSequence, EncodedSequence)> {
    Ok((
        encode_code(&p.code, code_vocab, code_max_len)?,
        encode_text(&p.statement, text_vocab, text_max_len)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::vocab::{MASK, UNK};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn vocab(words: &[&str]) -> Vocab {
        let counts: HashMap<String, usize> = words.iter().map(|w| (w.to_string(), 1)).collect();
        Vocab::from_counts(counts, 1, 1000)
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn short_sequence_layout() {
        let v = vocab(&["a", "b"]);
        let e = encode(&toks(&["a", "b"]), None, &v, 8).unwrap();
        let (a, b) = (v.id("a"), v.id("b"));
        assert_eq!(e.ids, vec![CLS, XCLS, a, b, SEP, PAD, PAD, PAD]);
        assert_eq!(e.attn_mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(e.real_len, 2);
        let special = TokenType::Special.index() as u8;
        assert!(e.type_ids.iter().all(|&t| t == special));
    }

    #[test]
    fn truncates_to_fit() {
        let v = vocab(&["a"]);
        let e = encode(&toks(&["a"; 10]), None, &v, 8).unwrap();
        assert_eq!(e.real_len, 5);
        assert_eq!(e.ids[7], SEP);
        assert!(e.attn_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn too_short_layout_rejected() {
        let v = vocab(&[]);
        let err = encode(&[], None, &v, 3).unwrap_err().to_string();
        assert!(err.contains("layout does not fit"), "{err}");
    }

    #[test]
    fn code_types_follow_tokens() {
        let v = vocab(&["int", "x"]);
        let e = encode_code("int x;", &v, 8).unwrap();
        assert_eq!(e.real_len, 3);
        assert_eq!(e.type_ids[2], TokenType::Keyword.index() as u8);
        assert_eq!(e.type_ids[3], TokenType::Identifier.index() as u8);
        assert_eq!(e.type_ids[4], TokenType::Punct.index() as u8);
        assert_eq!(e.ids[4], UNK);
        assert_eq!(e.type_ids[5], TokenType::Special.index() as u8);
    }

    proptest! {
        #[test]
        fn layout_invariants(
            words in prop::collection::vec("[abc]{1,2}", 0..20),
            max_len in 4usize..16,
        ) {
            let v = vocab(&["a", "b", "ab"]);
            let e = encode(&words, None, &v, max_len).unwrap();
            prop_assert_eq!(e.ids.len(), max_len);
            prop_assert_eq!(e.attn_mask.iter().map(|&m| m as usize).sum::<usize>(), e.real_len + 3);
            for (id, m) in e.ids.iter().zip(&e.attn_mask) {
                prop_assert_eq!(*m == 1, *id != PAD);
                prop_assert!(*id != MASK);
            }
            let decoded = v.decode(e.token_ids());
            let expected: Vec<String> = words
                .iter()
                .take(e.real_len)
                .map(|w| if v.contains(w) { w.clone() } else { "[UNK]".to_string() })
                .collect();
            prop_assert_eq!(decoded, expected);
        }
    }
}
