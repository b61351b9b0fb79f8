//! C lexer for loop regions.
//!
//! Produces `(kind, text)` pairs in source order. Comments and whitespace
//! are dropped; literal spellings are kept verbatim.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default admission cap on the number of tokens in a loop.
pub const DEFAULT_MAX_LEN: usize = 250;

pub const BEGIN_MARKER: &str = "#pragma looplearner begin";
pub const END_MARKER: &str = "#pragma looplearner end";

const KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "_Alignas", "_Alignof", "_Atomic", "_Bool",
    "_Complex", "_Generic", "_Imaginary", "_Noreturn", "_Static_assert", "_Thread_local",
];

// Longest match first.
const OPERATORS: &[&str] = &[
    ">>=", "<<=", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "*=", "/=",
    "%=", "+=", "-=", "&=", "^=", "|=", "+", "-", "*", "/", "%", "&", "|", "^", "!", "~", "<",
    ">", "=", "?", ":", ".",
];

const PUNCTUATION: &[&str] = &["...", "##", "(", ")", "[", "]", "{", "}", ";", ",", "#"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Keyword,
    Identifier,
    IntLiteral,
    FloatLiteral,
    CharLiteral,
    StringLiteral,
    Operator,
    Punctuation,
}

impl TokenKind {
    pub const ALL: [TokenKind; 8] = [
        TokenKind::Keyword,
        TokenKind::Identifier,
        TokenKind::IntLiteral,
        TokenKind::FloatLiteral,
        TokenKind::CharLiteral,
        TokenKind::StringLiteral,
        TokenKind::Operator,
        TokenKind::Punctuation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Keyword => "keyword",
            TokenKind::Identifier => "identifier",
            TokenKind::IntLiteral => "int-literal",
            TokenKind::FloatLiteral => "float-literal",
            TokenKind::CharLiteral => "char-literal",
            TokenKind::StringLiteral => "string-literal",
            TokenKind::Operator => "operator",
            TokenKind::Punctuation => "punctuation",
        }
    }

    /// Keywords, operators and punctuation: tokens fixed by the language.
    pub fn is_standard(self) -> bool {
        matches!(self, TokenKind::Keyword | TokenKind::Operator | TokenKind::Punctuation)
    }

    pub fn is_literal(self) -> bool {
        matches!(
            self,
            TokenKind::IntLiteral
                | TokenKind::FloatLiteral
                | TokenKind::CharLiteral
                | TokenKind::StringLiteral
        )
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// Verbatim source spelling.
    pub text: String,
}

impl Token {
    pub fn new(kind: TokenKind, text: impl Into<String>) -> Self {
        Token { kind, text: text.into() }
    }

    pub fn ident(text: impl Into<String>) -> Self {
        Token::new(TokenKind::Identifier, text)
    }

    pub fn int(value: i64) -> Self {
        Token::new(TokenKind::IntLiteral, value.to_string())
    }

    pub fn op(text: &str) -> Self {
        Token::new(TokenKind::Operator, text)
    }

    pub fn punct(text: &str) -> Self {
        Token::new(TokenKind::Punctuation, text)
    }

    pub fn keyword(text: &str) -> Self {
        Token::new(TokenKind::Keyword, text)
    }

    /// Is this token the operator or punctuator `s`?
    pub fn is(&self, s: &str) -> bool {
        matches!(self.kind, TokenKind::Operator | TokenKind::Punctuation | TokenKind::Keyword)
            && self.text == s
    }

    /// Numeric value of an integer literal (suffixes ignored).
    pub fn int_value(&self) -> Option<u64> {
        if self.kind != TokenKind::IntLiteral {
            return None;
        }
        parse_int_literal(&self.text)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{:?})", self.kind, self.text)
    }
}

/// Tokens of one loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub loop_id: String,
    pub tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(loop_id: impl Into<String>, tokens: Vec<Token>) -> Self {
        TokenSeq { loop_id: loop_id.into(), tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces. Re-lexes to the same token list.
    pub fn to_source(&self) -> String {
        join_tokens(&self.tokens)
    }
}

pub fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("invalid lexeme at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("missing loop region marker `{0}`")]
    MissingMarker(&'static str),
}

impl LexError {
    fn at(offset: usize, reason: impl Into<String>) -> Self {
        LexError::Invalid { offset, reason: reason.into() }
    }
}

/// Outcome of the length admission policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Admitted(TokenSeq),
    Rejected { len: usize },
}

impl Admission {
    pub fn is_admitted(&self) -> bool {
        matches!(self, Admission::Admitted(_))
    }
}

/// Admit sequences of at most `max_len` tokens; padding happens at encoding time.
pub fn admit(seq: TokenSeq, max_len: usize) -> Admission {
    if seq.len() <= max_len {
        Admission::Admitted(seq)
    } else {
        Admission::Rejected { len: seq.len() }
    }
}

/// Tokenize C source text.
pub fn tokenize(source: &str) -> Result<Vec<Token>, LexError> {
    Lexer { src: source.as_bytes(), pos: 0 }.run()
}

/// Tokenize `source` and tag the result with `loop_id`.
pub fn tokenize_loop(loop_id: &str, source: &str) -> Result<TokenSeq, LexError> {
    Ok(TokenSeq::new(loop_id, tokenize(source)?))
}

/// The text between the begin and end marker lines of a corpus file.
pub fn extract_region(file_text: &str) -> Result<&str, LexError> {
    let (start, end) = region_bounds(file_text)?;
    Ok(&file_text[start..end])
}

/// Byte range of the loop region (exclusive of both marker lines).
pub fn region_bounds(file_text: &str) -> Result<(usize, usize), LexError> {
    let mut offset = 0;
    let mut start = None;
    for line in file_text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if start.is_none() && trimmed == BEGIN_MARKER {
            start = Some(offset + line.len());
        } else if let Some(s) = start {
            if trimmed == END_MARKER {
                return Ok((s, offset));
            }
        }
        offset += line.len();
    }
    Err(LexError::MissingMarker(if start.is_none() { BEGIN_MARKER } else { END_MARKER }))
}

/// Replace the loop region of `file_text` with `region`, keeping the markers.
pub fn splice_region(file_text: &str, region: &str) -> Result<String, LexError> {
    let (start, end) = region_bounds(file_text)?;
    let mut out = String::with_capacity(file_text.len() + region.len());
    out.push_str(&file_text[..start]);
    out.push_str(region);
    if !region.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(&file_text[end..]);
    Ok(out)
}

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

/// Parse a C integer literal (decimal, hex or octal, optional u/l suffixes).
pub fn parse_int_literal(text: &str) -> Option<u64> {
    let body = text.trim_end_matches(['u', 'U', 'l', 'L']);
    let suffix = &text[body.len()..];
    if !valid_int_suffix(suffix) || body.is_empty() {
        return None;
    }
    if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        if hex.is_empty() {
            return None;
        }
        return u64::from_str_radix(hex, 16).ok();
    }
    if body.len() > 1 && body.starts_with('0') {
        return u64::from_str_radix(&body[1..], 8).ok();
    }
    if body.bytes().all(|b| b.is_ascii_digit()) {
        return body.parse().ok();
    }
    None
}

fn valid_int_suffix(s: &str) -> bool {
    let lower = s.to_ascii_lowercase();
    // l and ll must keep their case consistent; this is lenient on that point.
    matches!(lower.as_str(), "" | "u" | "l" | "ul" | "lu" | "ll" | "ull" | "llu")
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Lexer<'_> {
    fn peek(&self, ahead: usize) -> Option<u8> {
        self.src.get(self.pos + ahead).copied()
    }

    fn run(mut self) -> Result<Vec<Token>, LexError> {
        let mut tokens = Vec::new();
        while self.skip_trivia()? {
            let start = self.pos;
            let c = self.src[self.pos];
            let token = if c.is_ascii_alphabetic() || c == b'_' {
                self.word()
            } else if c.is_ascii_digit() || (c == b'.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) {
                self.number(start)?
            } else if c == b'\'' {
                self.quoted(b'\'', TokenKind::CharLiteral, start)?
            } else if c == b'"' {
                self.quoted(b'"', TokenKind::StringLiteral, start)?
            } else {
                self.symbol(start)?
            };
            tokens.push(token);
        }
        Ok(tokens)
    }

    /// Skip whitespace and comments. Returns false at end of input.
    fn skip_trivia(&mut self) -> Result<bool, LexError> {
        loop {
            match self.peek(0) {
                None => return Ok(false),
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'/') if self.peek(1) == Some(b'/') => {
                    while let Some(c) = self.peek(0) {
                        if c == b'\n' {
                            break;
                        }
                        self.pos += 1;
                    }
                }
                Some(b'/') if self.peek(1) == Some(b'*') => {
                    let start = self.pos;
                    self.pos += 2;
                    loop {
                        match self.peek(0) {
                            None => return Err(LexError::at(start, "unterminated comment")),
                            Some(b'*') if self.peek(1) == Some(b'/') => {
                                self.pos += 2;
                                break;
                            }
                            Some(_) => self.pos += 1,
                        }
                    }
                }
                Some(b'\\') if matches!(self.peek(1), Some(b'\n')) => self.pos += 2,
                Some(_) => return Ok(true),
            }
        }
    }

    fn word(&mut self) -> Token {
        let start = self.pos;
        while self.peek(0).is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let kind = if is_keyword(text) { TokenKind::Keyword } else { TokenKind::Identifier };
        Token::new(kind, text)
    }

    fn number(&mut self, start: usize) -> Result<Token, LexError> {
        // Scan a preprocessing number, then classify it.
        let hex = self.peek(0) == Some(b'0') && matches!(self.peek(1), Some(b'x' | b'X'));
        while let Some(c) = self.peek(0) {
            let exp_sign = matches!(c, b'+' | b'-')
                && self.pos > start
                && if hex {
                    matches!(self.src[self.pos - 1], b'p' | b'P')
                } else {
                    matches!(self.src[self.pos - 1], b'e' | b'E')
                };
            if c.is_ascii_alphanumeric() || c == b'.' || c == b'_' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let is_float = if hex {
            text.contains(['.', 'p', 'P'])
        } else {
            text.contains(['.', 'e', 'E'])
        };
        if is_float {
            if valid_float(text, hex) {
                Ok(Token::new(TokenKind::FloatLiteral, text))
            } else {
                Err(LexError::at(start, format!("malformed floating literal `{text}`")))
            }
        } else if parse_int_literal(text).is_some() {
            Ok(Token::new(TokenKind::IntLiteral, text))
        } else {
            Err(LexError::at(start, format!("malformed integer literal `{text}`")))
        }
    }

    fn quoted(&mut self, quote: u8, kind: TokenKind, start: usize) -> Result<Token, LexError> {
        self.pos += 1;
        let mut chars = 0;
        loop {
            match self.peek(0) {
                None | Some(b'\n') => {
                    return Err(LexError::at(start, "unterminated literal"));
                }
                Some(b'\\') => {
                    if self.peek(1).is_none() {
                        return Err(LexError::at(start, "unterminated literal"));
                    }
                    self.pos += 2;
                    chars += 1;
                }
                Some(c) if c == quote => {
                    self.pos += 1;
                    break;
                }
                Some(_) => {
                    self.pos += 1;
                    chars += 1;
                }
            }
        }
        if quote == b'\'' && chars == 0 {
            return Err(LexError::at(start, "empty character literal"));
        }
        let text = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        Ok(Token::new(kind, text))
    }

    fn symbol(&mut self, start: usize) -> Result<Token, LexError> {
        let rest = &self.src[self.pos..];
        let matches = |s: &&&str| rest.starts_with(s.as_bytes());
        // `...` and `##` must win over `.` and `#`; operators are longest-first.
        let punct_long = PUNCTUATION.iter().take(2).find(matches);
        if let Some(p) = punct_long {
            self.pos += p.len();
            return Ok(Token::punct(p));
        }
        if let Some(op) = OPERATORS.iter().find(matches) {
            self.pos += op.len();
            return Ok(Token::op(op));
        }
        if let Some(p) = PUNCTUATION.iter().find(matches) {
            self.pos += p.len();
            return Ok(Token::punct(p));
        }
        let ch = std::str::from_utf8(&self.src[start..])
            .ok()
            .and_then(|s| s.chars().next())
            .unwrap_or('\u{fffd}');
        Err(LexError::at(start, format!("unexpected character {ch:?}")))
    }
}

fn valid_float(text: &str, hex: bool) -> bool {
    let body = text.trim_end_matches(['f', 'F', 'l', 'L']);
    if text.len() - body.len() > 1 {
        return false;
    }
    if hex {
        let Some(rest) = body.get(2..) else { return false };
        let Some((mantissa, exp)) = rest.split_once(['p', 'P']) else { return false };
        let exp = exp.strip_prefix(['+', '-']).unwrap_or(exp);
        !mantissa.is_empty()
            && mantissa.chars().filter(|&c| c == '.').count() <= 1
            && mantissa.chars().all(|c| c.is_ascii_hexdigit() || c == '.')
            && !exp.is_empty()
            && exp.chars().all(|c| c.is_ascii_digit())
    } else {
        let (mantissa, exp) = match body.split_once(['e', 'E']) {
            Some((m, e)) => (m, Some(e)),
            None => (body, None),
        };
        let mantissa_ok = mantissa.chars().filter(|&c| c == '.').count() <= 1
            && mantissa.chars().any(|c| c.is_ascii_digit())
            && mantissa.chars().all(|c| c.is_ascii_digit() || c == '.');
        let exp_ok = exp.is_none_or(|e| {
            let e = e.strip_prefix(['+', '-']).unwrap_or(e);
            !e.is_empty() && e.chars().all(|c| c.is_ascii_digit())
        });
        mantissa_ok && exp_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src).unwrap().into_iter().map(|t| (t.kind, t.text)).collect()
    }

    #[test]
    fn increment_then_identifier() {
        assert_eq!(
            pairs("++Class"),
            vec![(TokenKind::Operator, "++".into()), (TokenKind::Identifier, "Class".into())]
        );
    }

    #[test]
    fn empty_source() {
        assert!(tokenize("").unwrap().is_empty());
        assert!(tokenize("  /* c */ // x\n").unwrap().is_empty());
    }

    #[test]
    fn regclass_header_prefix() {
        let toks = pairs("for(Class = 0; Class < 256; ++Class){");
        assert_eq!(
            &toks[..3],
            &[
                (TokenKind::Keyword, "for".to_string()),
                (TokenKind::Punctuation, "(".to_string()),
                (TokenKind::Identifier, "Class".to_string()),
            ]
        );
    }

    #[test]
    fn literal_kinds() {
        let toks = pairs("0x1F 017 42u 1.5 .5e-3 1e10f 'a' '\\n' \"s\\\"t\" \"a\" \"b\"");
        let kinds: Vec<_> = toks.iter().map(|(k, _)| *k).collect();
        use TokenKind::*;
        assert_eq!(
            kinds,
            vec![
                IntLiteral, IntLiteral, IntLiteral, FloatLiteral, FloatLiteral, FloatLiteral,
                CharLiteral, CharLiteral, StringLiteral, StringLiteral, StringLiteral
            ]
        );
        assert_eq!(tokenize("0x1F").unwrap()[0].int_value(), Some(31));
        assert_eq!(tokenize("017").unwrap()[0].int_value(), Some(15));
    }

    #[test]
    fn longest_operator_match() {
        let toks = pairs("a>>=b->c...d");
        let texts: Vec<_> = toks.iter().map(|(_, t)| t.as_str()).collect();
        assert_eq!(texts, vec!["a", ">>=", "b", "->", "c", "...", "d"]);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(
            tokenize("a = 09;"),
            Err(LexError::Invalid { offset: 4, reason: "malformed integer literal `09`".into() })
        );
        assert!(matches!(tokenize("x @ y"), Err(LexError::Invalid { offset: 2, .. })));
        assert!(matches!(tokenize("/* open"), Err(LexError::Invalid { offset: 0, .. })));
        assert!(matches!(tokenize("'abc"), Err(LexError::Invalid { offset: 0, .. })));
    }

    #[test]
    fn admission_boundary() {
        let seq = |n| TokenSeq::new("l", vec![Token::ident("x"); n]);
        assert!(admit(seq(250), 250).is_admitted());
        assert_eq!(admit(seq(251), 250), Admission::Rejected { len: 251 });
        assert!(admit(seq(0), 250).is_admitted());
    }

    #[test]
    fn region_extraction() {
        let file = "#include <x>\n#pragma looplearner begin\nfor(;;);\n#pragma looplearner end\nint z;\n";
        assert_eq!(extract_region(file).unwrap(), "for(;;);\n");
        let spliced = splice_region(file, "x = 1;").unwrap();
        assert_eq!(
            spliced,
            "#include <x>\n#pragma looplearner begin\nx = 1;\n#pragma looplearner end\nint z;\n"
        );
        assert_eq!(extract_region("int x;"), Err(LexError::MissingMarker(BEGIN_MARKER)));
    }

    proptest::proptest! {
        #[test]
        fn spaced_relex_is_stable(src in "[a-z0-9_ +*/%<>=!&|^~?:;,.()\\[\\]{}-]{0,60}") {
            if let Ok(tokens) = tokenize(&src) {
                let again = tokenize(&join_tokens(&tokens)).unwrap();
                proptest::prop_assert_eq!(again, tokens);
            }
        }
    }
}
