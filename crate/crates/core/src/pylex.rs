//! Python-style lexer and canonical renderer.
//!
//! [`tokenize`] turns source text into a flat stream of [`SourceToken`]s with
//! explicit `NEWLINE`, `INDENT` and `DEDENT` tokens. [`detokenize`] renders a
//! stream back to text using one fixed spacing convention, so that
//! `tokenize(detokenize(t))` reproduces `t` (ignoring positions).

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Python 3 keywords. Soft keywords (`match`, `case`, `_`) lex as names.
pub const KEYWORDS: [&str; 35] = [
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

const OPERATORS_3: [&str; 5] = ["**=", "//=", ">>=", "<<=", "..."];
const OPERATORS_2: [&str; 19] = [
    "->", ":=", "**", "//", "<<", ">>", "<=", ">=", "==", "!=", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "@=",
];
const OPERATORS_1: &str = "+-*/%@&|^~<>()[]{},:.;=";

const TAB_SIZE: usize = 8;

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Name,
    Number,
    String,
    Operator,
    Keyword,
    Newline,
    Indent,
    Dedent,
    Comment,
    EndMarker,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Name => "NAME",
            TokenKind::Number => "NUMBER",
            TokenKind::String => "STRING",
            TokenKind::Operator => "OPERATOR",
            TokenKind::Keyword => "KEYWORD",
            TokenKind::Newline => "NEWLINE",
            TokenKind::Indent => "INDENT",
            TokenKind::Dedent => "DEDENT",
            TokenKind::Comment => "COMMENT",
            TokenKind::EndMarker => "ENDMARKER",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenKind {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NAME" => TokenKind::Name,
            "NUMBER" => TokenKind::Number,
            "STRING" => TokenKind::String,
            "OPERATOR" => TokenKind::Operator,
            "KEYWORD" => TokenKind::Keyword,
            "NEWLINE" => TokenKind::Newline,
            "INDENT" => TokenKind::Indent,
            "DEDENT" => TokenKind::Dedent,
            "COMMENT" => TokenKind::Comment,
            "ENDMARKER" => TokenKind::EndMarker,
            other => return Err(LexError::Format(format!("unknown token kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceToken {
    pub kind: TokenKind,
    pub text: String,
    /// 1-based.
    pub line: usize,
    /// 0-based, in characters.
    pub col: usize,
}

impl SourceToken {
    pub fn new(kind: TokenKind, text: impl Into<String>, line: usize, col: usize) -> Self {
        SourceToken { kind, text: text.into(), line, col }
    }

    pub fn is_op(&self, op: &str) -> bool {
        self.kind == TokenKind::Operator && self.text == op
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text == kw
    }

    fn is_open_bracket(&self) -> bool {
        self.kind == TokenKind::Operator && matches!(self.text.as_str(), "(" | "[" | "{")
    }

    fn is_close_bracket(&self) -> bool {
        self.kind == TokenKind::Operator && matches!(self.text.as_str(), ")" | "]" | "}")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexError {
    #[error("unterminated string starting at line {line}, column {col}")]
    UnterminatedString { line: usize, col: usize },
    #[error("inconsistent indentation at line {line}")]
    InconsistentIndentation { line: usize },
    #[error("invalid character {ch:?} at line {line}, column {col}")]
    InvalidCharacter { ch: char, line: usize, col: usize },
    #[error("unbalanced INDENT/DEDENT tokens")]
    UnbalancedIndent,
    #[error("malformed token stream: {0}")]
    Format(String),
}

/// Tokenizes raw bytes, which must be UTF-8.
pub fn tokenize_bytes(source: &[u8], keep_comments: bool) -> Result<Vec<SourceToken>, LexError> {
    match std::str::from_utf8(source) {
        Ok(s) => tokenize(s, keep_comments),
        Err(e) => {
            let valid = &source[..e.valid_up_to()];
            // valid prefix is UTF-8 by construction
            let prefix = std::str::from_utf8(valid).unwrap_or_default();
            let line = prefix.matches('\n').count() + 1;
            let col = prefix.rsplit('\n').next().map_or(0, |l| l.chars().count());
            Err(LexError::InvalidCharacter { ch: char::REPLACEMENT_CHARACTER, line, col })
        }
    }
}

pub fn tokenize(source: &str, keep_comments: bool) -> Result<Vec<SourceToken>, LexError> {
    let source = source.strip_prefix('\u{feff}').unwrap_or(source);
    let normalized;
    let source = if source.contains('\r') {
        normalized = source.replace("\r\n", "\n").replace('\r', "\n");
        normalized.as_str()
    } else {
        source
    };
    Lexer::new(source, keep_comments).run()
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    line_start: usize,
    keep_comments: bool,
    paren_depth: usize,
    at_line_start: bool,
    line_has_tokens: bool,
    // (column with tab size 8, column with tab size 1)
    indents: Vec<(usize, usize)>,
    out: Vec<SourceToken>,
}

impl Lexer {
    fn new(source: &str, keep_comments: bool) -> Self {
        Lexer {
            chars: source.chars().collect(),
            pos: 0,
            line: 1,
            line_start: 0,
            keep_comments,
            paren_depth: 0,
            at_line_start: true,
            line_has_tokens: false,
            indents: vec![(0, 0)],
            out: Vec::new(),
        }
    }

    fn peek(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn col(&self) -> usize {
        self.pos - self.line_start
    }

    fn newline_at(&mut self, pos: usize) {
        self.line += 1;
        self.line_start = pos + 1;
    }

    fn push(&mut self, kind: TokenKind, text: String, line: usize, col: usize) {
        if !matches!(kind, TokenKind::Comment) {
            self.line_has_tokens = true;
        }
        self.out.push(SourceToken { kind, text, line, col });
    }

    fn invalid(&self, ch: char) -> LexError {
        LexError::InvalidCharacter { ch, line: self.line, col: self.col() }
    }

    fn run(mut self) -> Result<Vec<SourceToken>, LexError> {
        while self.pos < self.chars.len() {
            if self.at_line_start && self.paren_depth == 0 {
                if !self.indentation()? {
                    continue;
                }
            }
            let c = self.chars[self.pos];
            match c {
                ' ' | '\t' | '\x0c' => self.pos += 1,
                '\n' => {
                    if self.paren_depth == 0 && self.line_has_tokens {
                        let col = self.col();
                        self.push(TokenKind::Newline, "\n".into(), self.line, col);
                        self.line_has_tokens = false;
                        self.at_line_start = true;
                    } else if self.paren_depth == 0 {
                        self.at_line_start = true;
                    }
                    self.newline_at(self.pos);
                    self.pos += 1;
                }
                '\\' => {
                    if self.peek(1) == Some('\n') {
                        self.newline_at(self.pos + 1);
                        self.pos += 2;
                    } else {
                        return Err(self.invalid(c));
                    }
                }
                '#' => self.comment(),
                '"' | '\'' => self.string(self.pos)?,
                c if c.is_ascii_digit() => self.number(),
                '.' if self.peek(1).is_some_and(|d| d.is_ascii_digit()) => self.number(),
                c if c == '_' || c.is_alphabetic() => self.name()?,
                _ => self.operator()?,
            }
        }
        if self.line_has_tokens {
            let col = self.col();
            self.push(TokenKind::Newline, "\n".into(), self.line, col);
        }
        let (line, col) = (self.line, self.col());
        while self.indents.len() > 1 {
            self.indents.pop();
            self.push(TokenKind::Dedent, String::new(), line, col);
        }
        self.push(TokenKind::EndMarker, String::new(), line, col);
        Ok(self.out)
    }

    /// Measures indentation at the start of a logical line. Returns `false`
    /// when the line was blank or comment-only and has been consumed.
    fn indentation(&mut self) -> Result<bool, LexError> {
        let (mut col8, mut col1) = (0usize, 0usize);
        let mut p = self.pos;
        while let Some(&c) = self.chars.get(p) {
            match c {
                ' ' => {
                    col8 += 1;
                    col1 += 1;
                }
                '\t' => {
                    col8 = (col8 / TAB_SIZE + 1) * TAB_SIZE;
                    col1 += 1;
                }
                '\x0c' => {
                    col8 = 0;
                    col1 = 0;
                }
                _ => break,
            }
            p += 1;
        }
        self.pos = p;
        match self.chars.get(p) {
            None => return Ok(false),
            Some('\n') => {
                self.newline_at(p);
                self.pos = p + 1;
                return Ok(false);
            }
            Some('#') => {
                self.comment();
                return Ok(false);
            }
            Some('\\') if self.chars.get(p + 1) == Some(&'\n') => {
                // a continuation on an otherwise empty line carries no indentation
                self.at_line_start = false;
                return Ok(true);
            }
            _ => {}
        }
        self.at_line_start = false;
        let line = self.line;
        let col = self.col();
        let top = *self.indents.last().expect("indent stack never empty");
        if col8 == top.0 {
            if col1 != top.1 {
                return Err(LexError::InconsistentIndentation { line });
            }
        } else if col8 > top.0 {
            if col1 <= top.1 {
                return Err(LexError::InconsistentIndentation { line });
            }
            self.indents.push((col8, col1));
            self.out.push(SourceToken::new(TokenKind::Indent, "", line, col));
        } else {
            while col8 < self.indents.last().expect("indent stack never empty").0 {
                self.indents.pop();
                self.out.push(SourceToken::new(TokenKind::Dedent, "", line, col));
            }
            if self.indents.last() != Some(&(col8, col1)) {
                return Err(LexError::InconsistentIndentation { line });
            }
        }
        Ok(true)
    }

    fn comment(&mut self) {
        let start = self.pos;
        let col = self.col();
        while self.pos < self.chars.len() && self.chars[self.pos] != '\n' {
            self.pos += 1;
        }
        if self.keep_comments {
            let text: String = self.chars[start..self.pos].iter().collect();
            self.push(TokenKind::Comment, text, self.line, col);
        }
    }

    fn name(&mut self) -> Result<(), LexError> {
        let start = self.pos;
        let col = self.col();
        while self
            .peek(0)
            .is_some_and(|c| c == '_' || c.is_alphanumeric())
        {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        if matches!(self.peek(0), Some('"') | Some('\'')) && is_string_prefix(&text) {
            return self.string(start);
        }
        let kind = if is_keyword(&text) { TokenKind::Keyword } else { TokenKind::Name };
        self.push(kind, text, self.line, col);
        Ok(())
    }

    /// Scans a string literal whose (optional) prefix starts at `start`;
    /// `self.pos` points at the opening quote.
    fn string(&mut self, start: usize) -> Result<(), LexError> {
        let line = self.line;
        let col = start - self.line_start;
        let quote = self.chars[self.pos];
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        self.pos += if triple { 3 } else { 1 };
        let unterminated = LexError::UnterminatedString { line, col };
        loop {
            let Some(c) = self.peek(0) else {
                return Err(unterminated);
            };
            match c {
                '\\' => {
                    if self.peek(1) == Some('\n') {
                        self.newline_at(self.pos + 1);
                    }
                    if self.peek(1).is_none() {
                        return Err(unterminated);
                    }
                    self.pos += 2;
                }
                '\n' => {
                    if !triple {
                        return Err(unterminated);
                    }
                    self.newline_at(self.pos);
                    self.pos += 1;
                }
                c if c == quote => {
                    if !triple {
                        self.pos += 1;
                        break;
                    }
                    if self.peek(1) == Some(quote) && self.peek(2) == Some(quote) {
                        self.pos += 3;
                        break;
                    }
                    self.pos += 1;
                }
                _ => self.pos += 1,
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        self.push(TokenKind::String, text, line, col);
        Ok(())
    }

    fn number(&mut self) {
        let start = self.pos;
        let col = self.col();
        let digits = |lx: &mut Lexer, radix: u32| {
            while lx.peek(0).is_some_and(|c| c == '_' || c.is_digit(radix)) {
                lx.pos += 1;
            }
        };
        if self.peek(0) == Some('0')
            && matches!(self.peek(1), Some('x' | 'X' | 'o' | 'O' | 'b' | 'B'))
        {
            let radix = match self.peek(1) {
                Some('x' | 'X') => 16,
                Some('o' | 'O') => 8,
                _ => 2,
            };
            self.pos += 2;
            digits(self, radix);
        } else {
            digits(self, 10);
            if self.peek(0) == Some('.') {
                self.pos += 1;
                digits(self, 10);
            }
            if matches!(self.peek(0), Some('e' | 'E')) {
                let sign = usize::from(matches!(self.peek(1), Some('+' | '-')));
                if self.peek(1 + sign).is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1 + sign;
                    digits(self, 10);
                }
            }
            if matches!(self.peek(0), Some('j' | 'J')) {
                self.pos += 1;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        self.push(TokenKind::Number, text, self.line, col);
    }

    fn operator(&mut self) -> Result<(), LexError> {
        let col = self.col();
        let rest = |n: usize| -> String { self.chars[self.pos..].iter().take(n).collect() };
        let three = rest(3);
        let two = rest(2);
        let text = if OPERATORS_3.contains(&three.as_str()) {
            three
        } else if OPERATORS_2.contains(&two.as_str()) {
            two
        } else {
            let c = self.chars[self.pos];
            if !OPERATORS_1.contains(c) {
                return Err(self.invalid(c));
            }
            c.to_string()
        };
        match text.as_str() {
            "(" | "[" | "{" => self.paren_depth += 1,
            ")" | "]" | "}" => self.paren_depth = self.paren_depth.saturating_sub(1),
            _ => {}
        }
        self.pos += text.chars().count();
        self.push(TokenKind::Operator, text, self.line, col);
        Ok(())
    }
}

fn is_string_prefix(s: &str) -> bool {
    matches!(
        s.to_ascii_lowercase().as_str(),
        "r" | "u" | "b" | "f" | "br" | "rb" | "fr" | "rf"
    )
}

const UNARY_OPS: [&str; 6] = ["-", "+", "~", "*", "**", "@"];

/// Whether `op` (the previous token) acts as a prefix operator given the
/// token before it.
fn is_prefix_use(op: &SourceToken, before: Option<&SourceToken>) -> bool {
    if op.kind != TokenKind::Operator || !UNARY_OPS.contains(&op.text.as_str()) {
        return false;
    }
    match before {
        None => true,
        Some(b) => match b.kind {
            TokenKind::Operator => !b.is_close_bracket(),
            TokenKind::Keyword => !matches!(b.text.as_str(), "None" | "True" | "False"),
            _ => false,
        },
    }
}

fn needs_space(before: Option<&SourceToken>, prev: &SourceToken, cur: &SourceToken) -> bool {
    if prev.is_open_bracket() || cur.is_close_bracket() {
        return false;
    }
    if cur.kind == TokenKind::Operator && matches!(cur.text.as_str(), "," | ":" | ";") {
        return false;
    }
    if cur.is_op(".") {
        return !(matches!(prev.kind, TokenKind::Name | TokenKind::String) || prev.is_close_bracket());
    }
    if prev.is_op(".") {
        return !matches!(cur.kind, TokenKind::Name | TokenKind::Keyword);
    }
    if cur.is_op("(") || cur.is_op("[") {
        return !(matches!(prev.kind, TokenKind::Name | TokenKind::String) || prev.is_close_bracket());
    }
    if cur.kind != TokenKind::Operator && is_prefix_use(prev, before) {
        return false;
    }
    true
}

/// Renders a token stream as canonical source text: one space between atoms
/// except around brackets, before `,`/`:`/`;`, around attribute dots and
/// after prefix operators; four spaces per indentation level.
pub fn detokenize(tokens: &[SourceToken]) -> Result<String, LexError> {
    let mut out = String::new();
    let mut depth = 0usize;
    let mut at_line_start = true;
    let mut prev: Option<&SourceToken> = None;
    let mut before: Option<&SourceToken> = None;
    let mut ended = false;
    for (i, tok) in tokens.iter().enumerate() {
        if ended {
            return Err(LexError::UnbalancedIndent);
        }
        match tok.kind {
            TokenKind::Indent => depth += 1,
            TokenKind::Dedent => {
                depth = depth.checked_sub(1).ok_or(LexError::UnbalancedIndent)?;
            }
            TokenKind::Newline => {
                out.push('\n');
                at_line_start = true;
                prev = None;
                before = None;
            }
            TokenKind::EndMarker => {
                if depth != 0 {
                    return Err(LexError::UnbalancedIndent);
                }
                if !at_line_start {
                    out.push('\n');
                }
                ended = true;
            }
            TokenKind::Comment => {
                if at_line_start {
                    push_indent(&mut out, depth);
                } else {
                    out.push_str("  ");
                }
                out.push_str(&tok.text);
                let next_is_newline =
                    tokens.get(i + 1).is_some_and(|t| t.kind == TokenKind::Newline);
                if !next_is_newline {
                    out.push('\n');
                    at_line_start = true;
                    prev = None;
                    before = None;
                }
            }
            _ => {
                if at_line_start {
                    push_indent(&mut out, depth);
                } else if let Some(p) = prev {
                    if needs_space(before, p, tok) {
                        out.push(' ');
                    }
                }
                out.push_str(&tok.text);
                at_line_start = false;
                before = prev;
                prev = Some(tok);
            }
        }
    }
    if !ended {
        return Err(LexError::UnbalancedIndent);
    }
    Ok(out)
}

fn push_indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("    ");
    }
}

/// Space-separated rendering of token texts with layout tokens spelled out
/// as `NEWLINE`/`INDENT`/`DEDENT`; `ENDMARKER` is omitted.
pub fn render_flat(tokens: &[SourceToken]) -> String {
    let parts: Vec<&str> = tokens
        .iter()
        .filter_map(|t| match t.kind {
            TokenKind::Newline => Some("NEWLINE"),
            TokenKind::Indent => Some("INDENT"),
            TokenKind::Dedent => Some("DEDENT"),
            TokenKind::EndMarker => None,
            _ => Some(t.text.as_str()),
        })
        .collect();
    parts.join(" ")
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Result<String, LexError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(LexError::Format(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

/// One token per line: `KIND<TAB>text<TAB>line<TAB>col`.
pub fn write_tokens<W: Write>(mut w: W, tokens: &[SourceToken]) -> io::Result<()> {
    for t in tokens {
        writeln!(w, "{}\t{}\t{}\t{}", t.kind, escape_field(&t.text), t.line, t.col)?;
    }
    Ok(())
}

pub fn tokens_to_string(tokens: &[SourceToken]) -> String {
    let mut buf = Vec::new();
    write_tokens(&mut buf, tokens).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("token text is UTF-8")
}

pub fn read_tokens<R: BufRead>(r: R) -> Result<Vec<SourceToken>, LexError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| LexError::Format(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_token_line(&line).map_err(|e| match e {
            LexError::Format(m) => LexError::Format(format!("line {}: {m}", n + 1)),
            e => e,
        })?);
    }
    Ok(out)
}

pub fn parse_tokens(s: &str) -> Result<Vec<SourceToken>, LexError> {
    read_tokens(s.as_bytes())
}

fn parse_token_line(line: &str) -> Result<SourceToken, LexError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(LexError::Format(format!("expected 4 fields, found {}", fields.len())));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| LexError::Format(format!("bad position {s:?}")))
    };
    Ok(SourceToken {
        kind: fields[0].parse()?,
        text: unescape_field(fields[1])?,
        line: num(fields[2])?,
        col: num(fields[3])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src, false)
            .unwrap()
            .into_iter()
            .map(|t| (t.kind, t.text))
            .collect()
    }

    fn strip(tokens: &[SourceToken]) -> Vec<(TokenKind, &str)> {
        tokens.iter().map(|t| (t.kind, t.text.as_str())).collect()
    }

    #[test]
    fn simple_assignment() {
        use TokenKind::*;
        assert_eq!(
            kinds("x = 1\n"),
            vec![
                (Name, "x".into()),
                (Operator, "=".into()),
                (Number, "1".into()),
                (Newline, "\n".into()),
                (EndMarker, "".into()),
            ]
        );
    }

    #[test]
    fn one_indent_pair() {
        let toks = tokenize("if a:\n  b\n", false).unwrap();
        let k: Vec<TokenKind> = toks.iter().map(|t| t.kind).collect();
        use TokenKind::*;
        assert_eq!(
            k,
            vec![Keyword, Name, Operator, Newline, Indent, Name, Newline, Dedent, EndMarker]
        );
    }

    #[test]
    fn unterminated() {
        assert!(matches!(
            tokenize("'abc", false),
            Err(LexError::UnterminatedString { line: 1, col: 0 })
        ));
        assert!(matches!(
            tokenize("x = \"\"\"abc\n", false),
            Err(LexError::UnterminatedString { .. })
        ));
        assert!(matches!(
            tokenize("x = 'ab\ncd'", false),
            Err(LexError::UnterminatedString { .. })
        ));
    }

    #[test]
    fn inconsistent_dedent() {
        let src = "if a:\n    b\n  c\n";
        assert_eq!(
            tokenize(src, false),
            Err(LexError::InconsistentIndentation { line: 3 })
        );
    }

    #[test]
    fn ambiguous_tabs() {
        // a tab and eight spaces agree at tab size 8 but not at tab size 1
        let src = "if a:\n\tb\n        c\n";
        assert_eq!(
            tokenize(src, false),
            Err(LexError::InconsistentIndentation { line: 3 })
        );
        // consistent tabs are fine
        assert!(tokenize("if a:\n\tb\n\tc\n", false).is_ok());
    }

    #[test]
    fn invalid_characters() {
        assert!(matches!(
            tokenize("x = $y\n", false),
            Err(LexError::InvalidCharacter { ch: '$', line: 1, col: 4 })
        ));
        assert!(matches!(
            tokenize_bytes(b"x = 1\n\xff\n", false),
            Err(LexError::InvalidCharacter { line: 2, .. })
        ));
        assert!(matches!(tokenize("a ? b", false), Err(LexError::InvalidCharacter { .. })));
    }

    #[test]
    fn continuation_lines_produce_no_newline() {
        let toks = tokenize("x = (1,\n     2)\ny = 1 + \\\n    2\n", false).unwrap();
        let newlines = toks.iter().filter(|t| t.kind == TokenKind::Newline).count();
        assert_eq!(newlines, 2);
        assert!(!toks.iter().any(|t| t.kind == TokenKind::Indent));
    }

    #[test]
    fn comments_only_when_requested() {
        let src = "# head\nx = 1  # trailing\n";
        assert!(!tokenize(src, false).unwrap().iter().any(|t| t.kind == TokenKind::Comment));
        let with = tokenize(src, true).unwrap();
        let comments: Vec<&str> = with
            .iter()
            .filter(|t| t.kind == TokenKind::Comment)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(comments, vec!["# head", "# trailing"]);
    }

    #[test]
    fn literals() {
        use TokenKind::*;
        let toks = kinds("a = rb'x\\'y' + f\"{z}\" + 0x1F + 1_000.5e-3j + .5\n");
        let texts: Vec<(TokenKind, &str)> =
            toks.iter().map(|(k, t)| (*k, t.as_str())).collect();
        assert_eq!(texts[2], (String, "rb'x\\'y'"));
        assert_eq!(texts[4], (String, "f\"{z}\""));
        assert_eq!(texts[6], (Number, "0x1F"));
        assert_eq!(texts[8], (Number, "1_000.5e-3j"));
        assert_eq!(texts[10], (Number, ".5"));
    }

    #[test]
    fn triple_quoted_spans_lines() {
        let toks = tokenize("s = '''a\nb'''\nt = 1\n", false).unwrap();
        assert_eq!(toks[2].text, "'''a\nb'''");
        assert_eq!(toks[4].line, 3);
    }

    #[test]
    fn longest_operator_match() {
        let toks = kinds("a **= b // c -> d ... e != f\n");
        let ops: Vec<&str> = toks
            .iter()
            .filter(|(k, _)| *k == TokenKind::Operator)
            .map(|(_, t)| t.as_str())
            .collect();
        assert_eq!(ops, vec!["**=", "//", "->", "...", "!="]);
    }

    #[test]
    fn keywords_are_not_names() {
        for (k, t) in kinds("def f(None, match): pass\n") {
            if k == TokenKind::Name {
                assert!(!is_keyword(&t));
            }
        }
    }

    #[test]
    fn missing_final_newline_and_open_blocks() {
        let toks = tokenize("def f():\n    if x:\n        return 1", false).unwrap();
        let tail: Vec<TokenKind> = toks.iter().rev().take(4).map(|t| t.kind).collect();
        use TokenKind::*;
        assert_eq!(tail, vec![EndMarker, Dedent, Dedent, Newline]);
    }

    #[test]
    fn canonical_spacing() {
        let render = |s: &str| detokenize(&tokenize(s, false).unwrap()).unwrap();
        assert_eq!(render("x=1"), "x = 1\n");
        assert_eq!(render("f( a ,b )"), "f(a, b)\n");
        assert_eq!(render("os . path.join( 'a' )[0]"), "os.path.join('a')[0]\n");
        assert_eq!(render("x = - 1 ;y=a-b"), "x = -1; y = a - b\n");
        assert_eq!(render("def f(* args, ** kw):\n  return  not(a)"),
            "def f(*args, **kw):\n    return not (a)\n");
        assert_eq!(render("@ property\ndef f(): pass"), "@property\ndef f(): pass\n");
        assert_eq!(render("from . mod import  x"), "from .mod import x\n");
    }

    #[test]
    fn detokenize_renders_comments_on_their_own_lines() {
        let src = "if a:\n    b  # t\n    # own line\nc\n";
        let toks = tokenize(src, true).unwrap();
        let text = detokenize(&toks).unwrap();
        assert_eq!(text, "if a:\n    b  # t\n    # own line\nc\n");
        assert_eq!(strip(&tokenize(&text, true).unwrap()), strip(&toks));
    }

    #[test]
    fn detokenize_rejects_unbalanced() {
        let mut toks = tokenize("if a:\n  b\n", false).unwrap();
        toks.retain(|t| t.kind != TokenKind::Dedent);
        assert_eq!(detokenize(&toks), Err(LexError::UnbalancedIndent));
        let mut toks = tokenize("x\n", false).unwrap();
        toks.insert(0, SourceToken::new(TokenKind::Dedent, "", 1, 0));
        assert_eq!(detokenize(&toks), Err(LexError::UnbalancedIndent));
        toks.remove(0);
        toks.pop();
        assert_eq!(detokenize(&toks), Err(LexError::UnbalancedIndent));
    }

    #[test]
    fn serialization_escapes() {
        let toks = tokenize("s = 'a\\tb'\nt = '''x\ny'''\n", false).unwrap();
        let text = tokens_to_string(&toks);
        assert!(text.starts_with("NAME\ts\t1\t0\n"));
        assert!(text.contains("STRING\t'''x\\ny'''\t2\t4\n"));
        assert_eq!(parse_tokens(&text).unwrap(), toks);
        assert!(parse_tokens("NAME\tx\t1\n").is_err());
        assert!(parse_tokens("BOGUS\tx\t1\t0\n").is_err());
    }
}
