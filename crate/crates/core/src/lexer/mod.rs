//! Tokenization of statements and code, vocabularies, and the dual-CLS
//! sequence encoding.

mod code;
mod encode;
mod text;
pub mod vocab;

pub use code::{is_keyword, lex_code, CodeToken, TokenType, KEYWORDS};
pub use encode::{encode, encode_code, encode_problem, encode_text, EncodedSequence, FIRST_TOKEN};
pub use text::tokenize_text;
pub use vocab::{build_vocab, side_tokens, Side, Vocab};
