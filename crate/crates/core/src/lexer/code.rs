use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lexical category of a code token; doubles as the type-embedding row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenType {
    Keyword,
    Identifier,
    Number,
    String,
    Char,
    Operator,
    Punct,
    Preproc,
    Unknown,
    /// CLS, xCLS, SEP, PAD and MASK positions.
    Special,
}

impl TokenType {
    pub const ALL: [TokenType; 10] = [
        TokenType::Keyword,
        TokenType::Identifier,
        TokenType::Number,
        TokenType::String,
        TokenType::Char,
        TokenType::Operator,
        TokenType::Punct,
        TokenType::Preproc,
        TokenType::Unknown,
        TokenType::Special,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenType::Keyword => "KEYWORD",
            TokenType::Identifier => "IDENTIFIER",
            TokenType::Number => "NUMBER",
            TokenType::String => "STRING",
            TokenType::Char => "CHAR",
            TokenType::Operator => "OPERATOR",
            TokenType::Punct => "PUNCT",
            TokenType::Preproc => "PREPROC",
            TokenType::Unknown => "UNKNOWN",
            TokenType::Special => "SPECIAL",
        }
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown token type {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeToken {
    pub text: String,
    pub ttype: TokenType,
}

impl CodeToken {
    fn new(text: impl Into<String>, ttype: TokenType) -> Self {
        Self {
            text: text.into(),
            ttype,
        }
    }
}

pub const KEYWORDS: &[&str] = &[
    "alignas", "alignof", "and", "and_eq", "asm", "auto", "bitand", "bitor", "bool", "break",
    "case", "catch", "char", "char16_t", "char32_t", "char8_t", "class", "compl", "concept",
    "const", "const_cast", "consteval", "constexpr", "constinit", "continue", "co_await",
    "co_return", "co_yield", "decltype", "default", "delete", "do", "double", "dynamic_cast",
    "else", "enum", "explicit", "export", "extern", "false", "float", "for", "friend", "goto",
    "if", "inline", "int", "long", "mutable", "namespace", "new", "noexcept", "not", "not_eq",
    "nullptr", "operator", "or", "or_eq", "private", "protected", "public", "register",
    "reinterpret_cast", "requires", "restrict", "return", "short", "signed", "sizeof", "static",
    "static_assert", "static_cast", "struct", "switch", "template", "this", "thread_local",
    "throw", "true", "try", "typedef", "typeid", "typename", "union", "unsigned", "using",
    "virtual", "void", "volatile", "wchar_t", "while", "xor", "xor_eq", "_Bool", "_Complex",
    "_Imaginary",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

const OPERATORS_3: &[&str] = &["<<=", ">>=", "...", "->*", "<=>"];
const OPERATORS_2: &[&str] = &[
    "<=", ">=", "==", "!=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "&=", "|=",
    "^=", "<<", ">>", "->", "::", ".*",
];
const OPERATORS_1: &str = "+-*/%=<>!&|^~?:.";
const PUNCT: &str = "{}()[];,";

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    out: Vec<CodeToken>,
}

impl Lexer {
    fn peek(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).copied()
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.peek(0).is_some_and(&f) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn number(&mut self) -> String {
        let start = self.pos;
        if self.peek(0) == Some('0') && matches!(self.peek(1), Some('x' | 'X')) {
            self.pos += 2;
            self.take_while(|c| c.is_ascii_hexdigit());
        } else {
            self.take_while(|c| c.is_ascii_digit());
            if self.peek(0) == Some('.') {
                self.pos += 1;
                self.take_while(|c| c.is_ascii_digit());
            }
            if matches!(self.peek(0), Some('e' | 'E')) {
                let digit_at = |off| self.peek(off).is_some_and(|c: char| c.is_ascii_digit());
                if digit_at(1) {
                    self.pos += 1;
                } else if matches!(self.peek(1), Some('+' | '-')) && digit_at(2) {
                    self.pos += 2;
                }
                self.take_while(|c| c.is_ascii_digit());
            }
        }
        // suffixes such as `ull` or `f`, and anything glued on
        self.take_while(is_ident_continue);
        self.chars[start..self.pos].iter().collect()
    }

    /// Quoted literal starting at the current quote; stops at the matching
    /// unescaped quote or, if unterminated, at the end of the line.
    fn quoted(&mut self, quote: char) -> String {
        let start = self.pos;
        self.pos += 1;
        loop {
            match self.peek(0) {
                None | Some('\n') => {
                    warn!("unterminated {} literal", if quote == '"' { "string" } else { "char" });
                    break;
                }
                Some('\\') if self.peek(1).is_some_and(|c| c != '\n') => self.pos += 2,
                Some(c) => {
                    self.pos += 1;
                    if c == quote {
                        break;
                    }
                }
            }
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn operator(&mut self) -> Option<String> {
        for table in [OPERATORS_3, OPERATORS_2] {
            for op in table {
                let n = op.chars().count();
                if op.chars().enumerate().all(|(i, c)| self.peek(i) == Some(c)) {
                    self.pos += n;
                    return Some(op.to_string());
                }
            }
        }
        let c = self.peek(0)?;
        if OPERATORS_1.contains(c) {
            self.pos += 1;
            return Some(c.to_string());
        }
        None
    }

    fn run(mut self) -> Vec<CodeToken> {
        let mut at_line_start = true;
        let mut in_preproc = false;
        while let Some(c) = self.peek(0) {
            if c == '\n' {
                at_line_start = true;
                in_preproc = false;
                self.pos += 1;
                continue;
            }
            if c == '\\' && self.peek(1) == Some('\n') {
                // line continuation keeps a directive going
                self.pos += 2;
                continue;
            }
            if c.is_whitespace() {
                self.pos += 1;
                continue;
            }
            if at_line_start && c == '#' {
                self.pos += 1;
                let name = self.take_while(is_ident_continue);
                self.out.push(CodeToken::new(format!("#{name}"), TokenType::Preproc));
                in_preproc = true;
                at_line_start = false;
                continue;
            }
            at_line_start = false;

            let (text, ttype) = if is_ident_start(c) {
                let w = self.take_while(is_ident_continue);
                let t = if is_keyword(&w) {
                    TokenType::Keyword
                } else {
                    TokenType::Identifier
                };
                (w, t)
            } else if c.is_ascii_digit()
                || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit()))
            {
                (self.number(), TokenType::Number)
            } else if c == '"' {
                (self.quoted('"'), TokenType::String)
            } else if c == '\'' {
                (self.quoted('\''), TokenType::Char)
            } else if PUNCT.contains(c) {
                self.pos += 1;
                (c.to_string(), TokenType::Punct)
            } else if let Some(op) = self.operator() {
                (op, TokenType::Operator)
            } else {
                self.pos += 1;
                (c.to_string(), TokenType::Unknown)
            };
            let ttype = if in_preproc { TokenType::Preproc } else { ttype };
            self.out.push(CodeToken { text, ttype });
        }
        self.out
    }
}

/// Maximal-munch lexer for C-family source (comments already removed).
pub fn lex_code(code: &str) -> Vec<CodeToken> {
    Lexer {
        chars: code.chars().collect(),
        pos: 0,
        out: Vec::new(),
    }
    .run()
}
