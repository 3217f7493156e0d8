//! Comment- and whitespace-insensitive tokenization for C, C++ and Java.
//!
//! The lexer is single pass. Comments and whitespace are dropped, string and
//! character literals become single tokens carrying their exact source bytes,
//! and operators are split by maximal munch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Language;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated block comment starting at byte {offset}")]
    UnterminatedComment { offset: usize },
    #[error("unterminated string literal starting at byte {offset}")]
    UnterminatedString { offset: usize },
    #[error("unterminated character literal starting at byte {offset}")]
    UnterminatedChar { offset: usize },
}

impl LexError {
    pub fn offset(&self) -> usize {
        match self {
            LexError::UnterminatedComment { offset }
            | LexError::UnterminatedString { offset }
            | LexError::UnterminatedChar { offset } => *offset,
        }
    }
}

/// Ordered lexical tokens with comments and whitespace removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined with a single space; a stable key for hashing or dedup.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

// Longest first within each length class.
const C_OPERATORS: &[&str] = &[
    "<<=", ">>=", "<=>", "->*", "...", "%:%:", //
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=",
    "%=", "&=", "^=", "|=", "::", ".*", "##",
];

const JAVA_OPERATORS: &[&str] = &[
    ">>>=", //
    "<<=", ">>=", ">>>", "...", //
    "->", "::", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=",
    "/=", "%=", "&=", "^=", "|=",
];

fn operators(language: Language) -> &'static [&'static str] {
    match language {
        Language::C | Language::Cpp => C_OPERATORS,
        Language::Java => JAVA_OPERATORS,
    }
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'$' || c >= 0x80
}

fn is_ident_continue(c: u8) -> bool {
    is_ident_start(c) || c.is_ascii_digit()
}

/// Tokenizes `source`, discarding comments and whitespace.
pub fn normalize_code(source: &str, language: Language) -> Result<TokenSeq, LexError> {
    let bytes = source.as_bytes();
    let ops = operators(language);
    let mut tokens = Vec::new();
    let mut i = 0;

    while i < bytes.len() {
        let c = bytes[i];
        // whitespace, including backslash-newline continuations
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'\\' && matches!(bytes.get(i + 1), Some(b'\n')) {
            i += 2;
            continue;
        }
        if c == b'\\' && bytes.get(i + 1) == Some(&b'\r') && bytes.get(i + 2) == Some(&b'\n') {
            i += 3;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let start = i;
            i += 2;
            loop {
                if i + 1 >= bytes.len() {
                    return Err(LexError::UnterminatedComment { offset: start });
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            continue;
        }

        let start = i;
        if is_ident_start(c) {
            while i < bytes.len() && is_ident_continue(bytes[i]) {
                i += 1;
            }
            let word = &source[start..i];
            // C++ raw string: R"delim( ... )delim", optionally prefixed (u8R, LR, ...)
            if language == Language::Cpp && word.ends_with('R') && bytes.get(i) == Some(&b'"') {
                if matches!(word, "R" | "u8R" | "uR" | "UR" | "LR") {
                    i = lex_raw_string(bytes, i).ok_or(LexError::UnterminatedString { offset: start })?;
                    tokens.push(source[start..i].to_string());
                    continue;
                }
            }
            // Encoding prefixes glue onto the literal that follows.
            if language != Language::Java
                && matches!(word, "L" | "u" | "U" | "u8")
                && matches!(bytes.get(i), Some(b'"') | Some(b'\''))
            {
                i = lex_quoted(bytes, i)?;
                tokens.push(source[start..i].to_string());
                continue;
            }
            tokens.push(word.to_string());
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            i = lex_number(bytes, i);
            tokens.push(source[start..i].to_string());
            continue;
        }
        if c == b'"' || c == b'\'' {
            if language == Language::Java && source[i..].starts_with("\"\"\"") {
                i = source[i + 3..]
                    .find("\"\"\"")
                    .map(|p| i + 3 + p + 3)
                    .ok_or(LexError::UnterminatedString { offset: start })?;
            } else {
                i = lex_quoted(bytes, i)?;
            }
            tokens.push(source[start..i].to_string());
            continue;
        }
        if let Some(op) = ops.iter().find(|op| source[i..].starts_with(**op)) {
            i += op.len();
            tokens.push((*op).to_string());
            continue;
        }
        // Any other character stands alone; keep multi-byte chars whole.
        let ch_len = source[i..].chars().next().map_or(1, char::len_utf8);
        i += ch_len;
        tokens.push(source[start..i].to_string());
    }
    Ok(TokenSeq { tokens })
}

/// Lexes a quoted literal starting at `bytes[start]` (`"` or `'`), returning
/// the index one past the closing quote. A raw newline terminates nothing
/// and is an error.
fn lex_quoted(bytes: &[u8], start: usize) -> Result<usize, LexError> {
    let quote = bytes[start];
    let err = || {
        if quote == b'"' {
            LexError::UnterminatedString { offset: start }
        } else {
            LexError::UnterminatedChar { offset: start }
        }
    };
    let mut i = start + 1;
    loop {
        match bytes.get(i) {
            None | Some(b'\n') => return Err(err()),
            Some(b'\\') => {
                if i + 1 >= bytes.len() {
                    return Err(err());
                }
                i += 2;
            }
            Some(&b) if b == quote => return Ok(i + 1),
            Some(_) => i += 1,
        }
    }
}

fn lex_raw_string(bytes: &[u8], quote: usize) -> Option<usize> {
    let open = bytes[quote + 1..].iter().position(|&b| b == b'(')? + quote + 1;
    let delim = &bytes[quote + 1..open];
    let mut closing = Vec::with_capacity(delim.len() + 2);
    closing.push(b')');
    closing.extend_from_slice(delim);
    closing.push(b'"');
    bytes[open + 1..]
        .windows(closing.len())
        .position(|w| w == closing.as_slice())
        .map(|p| open + 1 + p + closing.len())
}

/// pp-number style: digits, letters, `_`, `.`, `'` separators, and signed exponents.
fn lex_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if matches!(b, b'+' | b'-') && i > start && matches!(bytes[i - 1], b'e' | b'E' | b'p' | b'P') {
            // Only an exponent sign in decimal/hex-float context.
            let hex = bytes[start..i].starts_with(b"0x") || bytes[start..i].starts_with(b"0X");
            let exp_char = bytes[i - 1];
            if (hex && matches!(exp_char, b'p' | b'P')) || (!hex && matches!(exp_char, b'e' | b'E')) {
                i += 1;
                continue;
            }
            break;
        }
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
            i += 1;
        } else if b == b'\'' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_alphanumeric() && i > start {
            // C++14 digit separator
            i += 1;
        } else {
            break;
        }
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<String> {
        normalize_code(src, Language::C).unwrap().tokens
    }

    #[test]
    fn whitespace_and_comments_are_ignored() {
        assert_eq!(toks("int x=1; // c"), toks("int  x = 1 ;"));
        assert_eq!(toks("/* a */int f(){}"), vec!["int", "f", "(", ")", "{", "}"]);
    }

    #[test]
    fn literals_keep_comment_markers() {
        let t = toks("char *s = \"// not a comment\";");
        assert!(t.contains(&"\"// not a comment\"".to_string()));
        let t = toks("c = '/'; d = \"/* x */\";");
        assert_eq!(t, vec!["c", "=", "'/'", ";", "d", "=", "\"/* x */\"", ";"]);
        let t = toks(r#"s = "a\"b // c";"#);
        assert_eq!(t[2], r#""a\"b // c""#);
    }

    #[test]
    fn maximal_munch() {
        assert_eq!(toks("a<<=b"), vec!["a", "<<=", "b"]);
        assert_eq!(toks("p->q"), vec!["p", "->", "q"]);
        assert_eq!(toks("a+++b"), vec!["a", "++", "+", "b"]);
        let java = normalize_code("x >>>= 2", Language::Java).unwrap().tokens;
        assert_eq!(java, vec!["x", ">>>=", "2"]);
        // `>>` splits differently from `> >`; lexical EM keeps that distinction
        assert_ne!(toks("a>>b"), toks("a> >b"));
    }

    #[test]
    fn numbers_are_byte_exact() {
        assert_eq!(toks("x = 0x10;")[2], "0x10");
        assert_ne!(toks("x = 0x10;"), toks("x = 16;"));
        assert_eq!(toks("1.5e-3f+2"), vec!["1.5e-3f", "+", "2"]);
        assert_eq!(toks("0x1p+3"), vec!["0x1p+3"]);
        assert_eq!(toks("0xe+1"), vec!["0xe", "+", "1"]);
        assert_eq!(toks(".5"), vec![".5"]);
    }

    #[test]
    fn preprocessor_lines_are_tokens() {
        assert_eq!(toks("#include <a.h>"), vec!["#", "include", "<", "a", ".", "h", ">"]);
        assert_eq!(toks("#define X \\\n 1"), vec!["#", "define", "X", "1"]);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(
            normalize_code("int x; /* open", Language::C),
            Err(LexError::UnterminatedComment { offset: 7 })
        );
        assert_eq!(
            normalize_code("s = \"abc", Language::C),
            Err(LexError::UnterminatedString { offset: 4 })
        );
        assert_eq!(
            normalize_code("c = 'a\n';", Language::Java),
            Err(LexError::UnterminatedChar { offset: 4 })
        );
    }

    #[test]
    fn cpp_raw_strings_and_prefixes() {
        let t = normalize_code(r#"auto s = R"x(a "// b)x";"#, Language::Cpp).unwrap().tokens;
        assert_eq!(t[3], r#"R"x(a "// b)x""#);
        let t = normalize_code(r#"w = L"wide";"#, Language::Cpp).unwrap().tokens;
        assert_eq!(t, vec!["w", "=", r#"L"wide""#, ";"]);
    }

    #[test]
    fn java_text_blocks() {
        let src = "String s = \"\"\"\n  // kept\n  \"\"\";";
        let t = normalize_code(src, Language::Java).unwrap().tokens;
        assert_eq!(t.len(), 5);
        assert!(t[3].contains("// kept"));
    }
}
