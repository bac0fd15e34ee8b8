//! Token extraction for located attack strings.
//!
//! The lexer is a reduced HTML tokenizer that recognises exactly six token
//! kinds. Tag and attribute names become part of the token symbol; attribute
//! values, text and comments collapse to class symbols whose concrete
//! spellings are collected in a [`RawCorpus`].

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    StartTag,
    Attribute,
    AttrValue,
    PlainText,
    EndTag,
    Comment,
}

impl TokenKind {
    pub const ALL: [TokenKind; 6] = [
        TokenKind::StartTag,
        TokenKind::Attribute,
        TokenKind::AttrValue,
        TokenKind::PlainText,
        TokenKind::EndTag,
        TokenKind::Comment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::StartTag => "start_tag",
            TokenKind::Attribute => "attribute",
            TokenKind::AttrValue => "attr_value",
            TokenKind::PlainText => "plain_text",
            TokenKind::EndTag => "end_tag",
            TokenKind::Comment => "comment",
        }
    }

    /// Kinds whose symbol carries a name rather than the class marker.
    pub fn is_named(self) -> bool {
        matches!(
            self,
            TokenKind::StartTag | TokenKind::Attribute | TokenKind::EndTag
        )
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymbolParseError {
    #[error("missing `:` in symbol `{0}`")]
    MissingSeparator(String),
    #[error("unknown token kind `{0}`")]
    UnknownKind(String),
    #[error("invalid name `{name}` for kind {kind}")]
    InvalidName { kind: TokenKind, name: String },
}

impl FromStr for TokenKind {
    type Err = SymbolParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TokenKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SymbolParseError::UnknownKind(s.to_string()))
    }
}

/// Marker name shared by every value, text and comment token.
pub const CLASS_NAME: &str = "*";

/// Terminal symbol of the structure model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSymbol {
    kind: TokenKind,
    name: String,
}

impl TokenSymbol {
    /// Symbol for a named kind; the name is lowercased. Class kinds ignore
    /// `name` and use the marker.
    pub fn new(kind: TokenKind, name: &str) -> Self {
        let name = if kind.is_named() {
            name.to_lowercase()
        } else {
            CLASS_NAME.to_string()
        };
        TokenSymbol { kind, name }
    }

    pub fn class(kind: TokenKind) -> Self {
        TokenSymbol {
            kind,
            name: CLASS_NAME.to_string(),
        }
    }

    pub fn start_tag(name: &str) -> Self {
        Self::new(TokenKind::StartTag, name)
    }

    pub fn end_tag(name: &str) -> Self {
        Self::new(TokenKind::EndTag, name)
    }

    pub fn attribute(name: &str) -> Self {
        Self::new(TokenKind::Attribute, name)
    }

    pub fn plain_text() -> Self {
        Self::class(TokenKind::PlainText)
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for TokenSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.name)
    }
}

impl FromStr for TokenSymbol {
    type Err = SymbolParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, name) = s
            .split_once(':')
            .ok_or_else(|| SymbolParseError::MissingSeparator(s.to_string()))?;
        let kind: TokenKind = kind.parse()?;
        let valid = if kind.is_named() {
            !name.is_empty() && name.to_lowercase() == name
        } else {
            name == CLASS_NAME
        };
        if !valid {
            return Err(SymbolParseError::InvalidName {
                kind,
                name: name.to_string(),
            });
        }
        Ok(TokenSymbol {
            kind,
            name: name.to_string(),
        })
    }
}

impl Serialize for TokenSymbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenSymbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub symbol: TokenSymbol,
    /// Original substring, case preserved. Quoted attribute values keep
    /// their quotes and an attribute introduced by `/` keeps the slash.
    pub raw: String,
    /// Byte offsets of `raw` in the source.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn symbols(&self) -> Vec<TokenSymbol> {
        self.tokens.iter().map(|t| t.symbol.clone()).collect()
    }
}

/// Characters the lexer consumes without assigning them to a token.
pub fn is_structural(c: char) -> bool {
    matches!(c, '<' | '>' | '=' | '/' | '"' | '\'' | '!' | '-') || is_tag_space(c)
}

fn is_tag_space(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r' | '\x0c')
}

fn is_space_byte(b: u8) -> bool {
    is_tag_space(b as char)
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    tokens: Vec<Token>,
}

impl<'a> Lexer<'a> {
    fn emit(&mut self, kind: TokenKind, name: &str, span: Range<usize>) {
        if span.is_empty() {
            return;
        }
        self.tokens.push(Token {
            symbol: TokenSymbol::new(kind, name),
            raw: self.src[span.clone()].to_string(),
            span,
        });
    }

    fn skip_space(&self, mut i: usize) -> usize {
        while i < self.bytes.len() && is_space_byte(self.bytes[i]) {
            i += 1;
        }
        i
    }

    fn find(&self, from: usize, needle: &str) -> Option<usize> {
        self.src[from..].find(needle).map(|p| p + from)
    }

    fn run(&mut self) {
        let n = self.bytes.len();
        let mut i = 0;
        let mut text_start = 0;
        while i < n {
            if self.bytes[i] != b'<' {
                i += 1;
                continue;
            }
            let next = self.bytes.get(i + 1).copied();
            let after = self.bytes.get(i + 2).copied();
            let resume = if self.src[i..].starts_with("<!--") {
                self.emit(TokenKind::PlainText, "", text_start..i);
                Some(self.comment(i + 4))
            } else if next == Some(b'!') {
                self.emit(TokenKind::PlainText, "", text_start..i);
                let end = self.find(i + 2, ">").unwrap_or(n);
                self.emit(TokenKind::Comment, "", i + 2..end);
                Some((end + 1).min(n))
            } else if next == Some(b'/') && after.is_some_and(|b| b.is_ascii_alphabetic()) {
                self.emit(TokenKind::PlainText, "", text_start..i);
                Some(self.tag(i + 2, TokenKind::EndTag))
            } else if next.is_some_and(|b| b.is_ascii_alphabetic()) {
                self.emit(TokenKind::PlainText, "", text_start..i);
                Some(self.tag(i + 1, TokenKind::StartTag))
            } else {
                None
            };
            match resume {
                Some(r) => {
                    i = r;
                    text_start = r;
                }
                None => i += 1,
            }
        }
        self.emit(TokenKind::PlainText, "", text_start..n);
    }

    fn comment(&mut self, body: usize) -> usize {
        let n = self.bytes.len();
        // `<!-->` and `<!--->` close immediately.
        for abrupt in [">", "->"] {
            if self.src[body..].starts_with(abrupt) {
                return body + abrupt.len();
            }
        }
        match self.find(body, "-->") {
            Some(end) => {
                self.emit(TokenKind::Comment, "", body..end);
                end + 3
            }
            None => {
                self.emit(TokenKind::Comment, "", body..n);
                n
            }
        }
    }

    /// Lex a tag whose name starts at `start`; returns the resume offset.
    fn tag(&mut self, start: usize, kind: TokenKind) -> usize {
        let n = self.bytes.len();
        let mut i = start;
        while i < n && !is_space_byte(self.bytes[i]) && !matches!(self.bytes[i], b'/' | b'>') {
            i += 1;
        }
        let name = &self.src[start..i];
        self.emit(kind, name, start..i);
        loop {
            while i < n && (is_space_byte(self.bytes[i]) || self.bytes[i] == b'/') {
                i += 1;
            }
            if i >= n {
                return n;
            }
            if self.bytes[i] == b'>' {
                return i + 1;
            }
            let name_start = i;
            let raw_start = if self.bytes[i - 1] == b'/' { i - 1 } else { i };
            i += 1;
            while i < n
                && !is_space_byte(self.bytes[i])
                && !matches!(self.bytes[i], b'/' | b'>' | b'=')
            {
                i += 1;
            }
            let attr = &self.src[name_start..i];
            self.emit(TokenKind::Attribute, attr, raw_start..i);
            let j = self.skip_space(i);
            if j >= n || self.bytes[j] != b'=' {
                continue;
            }
            i = self.skip_space(j + 1);
            if i >= n {
                return n;
            }
            match self.bytes[i] {
                q @ (b'"' | b'\'') => {
                    let end = self.src[i + 1..]
                        .find(q as char)
                        .map(|p| i + 1 + p + 1)
                        .unwrap_or(n);
                    self.emit(TokenKind::AttrValue, "", i..end);
                    i = end;
                }
                b'>' => {}
                _ => {
                    let s = i;
                    while i < n && !is_space_byte(self.bytes[i]) && self.bytes[i] != b'>' {
                        i += 1;
                    }
                    self.emit(TokenKind::AttrValue, "", s..i);
                }
            }
        }
    }
}

/// Split an attack string into typed tokens. Total and deterministic;
/// unterminated constructs at end of input keep what was seen.
pub fn tokenize(attack: &str) -> TokenSequence {
    let mut lexer = Lexer {
        src: attack,
        bytes: attack.as_bytes(),
        tokens: Vec::new(),
    };
    lexer.run();
    TokenSequence {
        tokens: lexer.tokens,
        source: attack.to_string(),
    }
}

/// Multiset of original substrings observed for each symbol.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawCorpus {
    entries: BTreeMap<TokenSymbol, BTreeMap<String, u64>>,
}

impl RawCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, symbol: TokenSymbol, raw: &str, count: u64) {
        if count == 0 {
            return;
        }
        *self
            .entries
            .entry(symbol)
            .or_default()
            .entry(raw.to_string())
            .or_insert(0) += count;
    }

    /// Record every token of `seq`.
    pub fn absorb(&mut self, seq: &TokenSequence) {
        for t in &seq.tokens {
            self.add(t.symbol.clone(), &t.raw, 1);
        }
    }

    /// Pointwise count addition.
    pub fn merge(&mut self, other: &RawCorpus) {
        for (sym, raws) in &other.entries {
            for (raw, &c) in raws {
                self.add(sym.clone(), raw, c);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.values().flat_map(|m| m.values()).sum()
    }

    pub fn contains(&self, symbol: &TokenSymbol) -> bool {
        self.entries.contains_key(symbol)
    }

    pub fn raws(&self, symbol: &TokenSymbol) -> Option<&BTreeMap<String, u64>> {
        self.entries.get(symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &TokenSymbol> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSymbol, &BTreeMap<String, u64>)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One sequence record: tab-separated `kind:name` fields.
pub fn format_record(symbols: &[TokenSymbol]) -> String {
    symbols
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn parse_record(line: &str) -> Result<Vec<TokenSymbol>, SymbolParseError> {
    line.split('\t').map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(seq: &TokenSequence) -> Vec<(TokenKind, &str, &str)> {
        seq.tokens
            .iter()
            .map(|t| (t.symbol.kind(), t.symbol.name(), t.raw.as_str()))
            .collect()
    }

    #[test]
    fn double_quote_breakout() {
        let seq = tokenize("\"><script>alert(123)</script>");
        use TokenKind::*;
        assert_eq!(
            kinds(&seq),
            vec![
                (PlainText, "*", "\">"),
                (StartTag, "script", "script"),
                (PlainText, "*", "alert(123)"),
                (EndTag, "script", "script"),
            ]
        );
    }

    #[test]
    fn slash_separated_attribute() {
        let seq = tokenize("<iframe/src=http://xssed.com>");
        use TokenKind::*;
        assert_eq!(
            kinds(&seq),
            vec![
                (StartTag, "iframe", "iframe"),
                (Attribute, "src", "/src"),
                (AttrValue, "*", "http://xssed.com"),
            ]
        );
    }

    #[test]
    fn comment_token() {
        let seq = tokenize("<!--x-->");
        assert_eq!(kinds(&seq), vec![(TokenKind::Comment, "*", "x")]);
        assert!(tokenize("<!---->").is_empty());
        assert_eq!(
            kinds(&tokenize("<!doctype>")),
            vec![(TokenKind::Comment, "*", "doctype")]
        );
    }

    #[test]
    fn case_is_kept_in_raw() {
        let seq = tokenize("</ScRiPt>");
        assert_eq!(seq.tokens[0].symbol, TokenSymbol::end_tag("script"));
        assert_eq!(seq.tokens[0].raw, "ScRiPt");
    }

    #[test]
    fn quoted_values_and_unterminated_input() {
        use TokenKind::*;
        let seq = tokenize("<img src=\"x\" onerror='alert(1)'");
        assert_eq!(
            kinds(&seq),
            vec![
                (StartTag, "img", "img"),
                (Attribute, "src", "src"),
                (AttrValue, "*", "\"x\""),
                (Attribute, "onerror", "onerror"),
                (AttrValue, "*", "'alert(1)'"),
            ]
        );
        let seq = tokenize("<a href=\"java");
        assert_eq!(seq.tokens.last().unwrap().raw, "\"java");
    }

    #[test]
    fn stray_markup_is_text() {
        use TokenKind::*;
        assert_eq!(
            kinds(&tokenize("a < b >\"")),
            vec![(PlainText, "*", "a < b >\"")]
        );
        assert_eq!(
            kinds(&tokenize("1'><b>")),
            vec![(PlainText, "*", "1'>"), (StartTag, "b", "b")]
        );
    }

    #[test]
    fn empty_attribute_value_emits_no_value() {
        use TokenKind::*;
        assert_eq!(
            kinds(&tokenize("<a x=>y")),
            vec![
                (StartTag, "a", "a"),
                (Attribute, "x", "x"),
                (PlainText, "*", "y")
            ]
        );
    }

    #[test]
    fn absorb_counts() {
        let seq = tokenize("\"><script>alert(123)</script>");
        let mut corpus = RawCorpus::new();
        corpus.absorb(&seq);
        assert_eq!(corpus.total(), 4);
        corpus.absorb(&seq);
        assert_eq!(corpus.total(), 8);
        let raws = corpus.raws(&TokenSymbol::start_tag("script")).unwrap();
        assert_eq!(raws["script"], 2);
    }

    #[test]
    fn case_variants_share_a_symbol() {
        let mut corpus = RawCorpus::new();
        corpus.absorb(&tokenize("<script><ScRiPt>"));
        let raws = corpus.raws(&TokenSymbol::start_tag("script")).unwrap();
        assert_eq!(raws.len(), 2);
        assert_eq!(raws.values().sum::<u64>(), 2);
    }

    #[test]
    fn symbol_text_round_trip() {
        let s: TokenSymbol = "attr_value:*".parse().unwrap();
        assert_eq!(s, TokenSymbol::class(TokenKind::AttrValue));
        assert!("attr_value:x".parse::<TokenSymbol>().is_err());
        assert!("tag:x".parse::<TokenSymbol>().is_err());
        assert!("start_tag:Script".parse::<TokenSymbol>().is_err());
        let rec = format_record(&tokenize("<b>x</b>").symbols());
        assert_eq!(rec, "start_tag:b\tplain_text:*\tend_tag:b");
        assert_eq!(parse_record(&rec).unwrap().len(), 3);
    }
}
