//! Canonical decoding of obfuscated attack strings and single-layer
//! re-encoding for obfuscated payload output.
//!
//! A combined decode pass applies, in order, lenient percent-decoding,
//! HTML character-reference decoding (named and numeric, with or without
//! the trailing semicolon) and removal of C0 control characters other than
//! tab, line feed and carriage return. Passes repeat until the text stops
//! changing, which collapses double and triple encodings.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on combined decode passes.
pub const DEFAULT_MAX_PASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("max_passes must be at least 1")]
    InvalidMaxPasses,
    #[error("decoding did not reach a fixpoint within {max_passes} passes")]
    FixpointNotReached { max_passes: usize },
}

/// One decoding layer that changed the text during some pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    Percent,
    Entity,
    ControlStrip,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Percent => "percent",
            Layer::Entity => "entity",
            Layer::ControlStrip => "control-strip",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeTrace {
    pub input: Vec<u8>,
    pub output: String,
    /// Number of combined passes, including the final confirming pass.
    pub passes: usize,
    /// Layers that changed the text, in the order they fired. Empty when the
    /// input was already canonical.
    pub layers: Vec<Layer>,
}

/// Decode `input` until one more combined pass changes nothing.
pub fn decode_fixpoint(input: &[u8], max_passes: usize) -> Result<DecodeTrace, CodecError> {
    if max_passes == 0 {
        return Err(CodecError::InvalidMaxPasses);
    }
    let mut current: Cow<'_, [u8]> = Cow::Borrowed(input);
    let mut layers = Vec::new();
    for pass in 1..=max_passes {
        let (out, fired) = combined_pass(&current);
        if out.as_bytes() == current.as_ref() {
            return Ok(DecodeTrace {
                input: input.to_vec(),
                output: out,
                passes: pass,
                layers,
            });
        }
        layers.extend(fired);
        current = Cow::Owned(out.into_bytes());
    }
    Err(CodecError::FixpointNotReached { max_passes })
}

/// Decode with the default pass bound.
pub fn decode_str(input: &str) -> Result<DecodeTrace, CodecError> {
    decode_fixpoint(input.as_bytes(), DEFAULT_MAX_PASSES)
}

/// Canonical form of `input`, or `input` itself when the fixpoint is out
/// of reach.
pub fn canonicalize(input: &str) -> String {
    match decode_str(input) {
        Ok(trace) => trace.output,
        Err(_) => input.to_string(),
    }
}

fn combined_pass(input: &[u8]) -> (String, Vec<Layer>) {
    let mut fired = Vec::new();
    let percent = percent_decode(input);
    if let Cow::Owned(_) = percent {
        fired.push(Layer::Percent);
    }
    let text = utf8_passthrough(&percent);
    let entity = decode_entities(&text);
    if entity != text {
        fired.push(Layer::Entity);
    }
    let stripped = strip_controls(&entity);
    if stripped.len() != entity.len() {
        fired.push(Layer::ControlStrip);
    }
    (stripped, fired)
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Lenient `%XX` decoding. Malformed escapes pass through verbatim and `+`
/// is left alone.
pub fn percent_decode(input: &[u8]) -> Cow<'_, [u8]> {
    let Some(first) = input.iter().position(|&b| b == b'%') else {
        return Cow::Borrowed(input);
    };
    let mut out = Vec::with_capacity(input.len());
    out.extend_from_slice(&input[..first]);
    let mut changed = false;
    let mut i = first;
    while i < input.len() {
        let b = input[i];
        if b == b'%' && i + 2 < input.len() {
            if let (Some(hi), Some(lo)) = (hex_val(input[i + 1]), hex_val(input[i + 2])) {
                out.push(hi << 4 | lo);
                changed = true;
                i += 3;
                continue;
            }
        }
        out.push(b);
        i += 1;
    }
    if changed {
        Cow::Owned(out)
    } else {
        Cow::Borrowed(input)
    }
}

/// UTF-8 decoding where each invalid byte maps to the code point of the same
/// value, so no input byte is lost.
pub fn utf8_passthrough(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        out.extend(chunk.invalid().iter().map(|&b| char::from(b)));
    }
    out
}

fn strip_controls(s: &str) -> String {
    s.chars().filter(|c| !is_stripped_control(*c)).collect()
}

fn is_stripped_control(c: char) -> bool {
    matches!(c, '\u{0}'..='\u{8}' | '\u{b}'..='\u{c}' | '\u{e}'..='\u{1f}')
}

struct EntityTable {
    /// `name;` and legacy `name` forms, without the leading ampersand.
    by_name: HashMap<&'static str, &'static str>,
    max_len: usize,
}

fn entity_table() -> &'static EntityTable {
    static TABLE: OnceLock<EntityTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut by_name = HashMap::with_capacity(entities::ENTITIES.len());
        let mut max_len = 0;
        for e in entities::ENTITIES.iter() {
            let name = e.entity.trim_start_matches('&');
            max_len = max_len.max(name.len());
            by_name.insert(name, e.characters);
        }
        EntityTable { by_name, max_len }
    })
}

/// Decode HTML character references in one left-to-right scan. Decoded
/// text is not rescanned.
pub fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    let mut plain_start = 0;
    while i < bytes.len() {
        if bytes[i] != b'&' {
            i += 1;
            continue;
        }
        if let Some((decoded, consumed)) = match_reference(&s[i + 1..]) {
            out.push_str(&s[plain_start..i]);
            out.push_str(&decoded);
            i += 1 + consumed;
            plain_start = i;
        } else {
            i += 1;
        }
    }
    out.push_str(&s[plain_start..]);
    out
}

/// Match a character reference starting just after `&`. Returns the
/// replacement text and the number of bytes consumed.
fn match_reference(rest: &str) -> Option<(Cow<'static, str>, usize)> {
    let bytes = rest.as_bytes();
    if bytes.first() == Some(&b'#') {
        return match_numeric(bytes).map(|(c, n)| (Cow::Owned(c.to_string()), n));
    }
    let table = entity_table();
    let run = bytes
        .iter()
        .take(table.max_len)
        .take_while(|b| b.is_ascii_alphanumeric())
        .count();
    if run == 0 {
        return None;
    }
    if bytes.get(run) == Some(&b';') {
        if let Some(chars) = table.by_name.get(&rest[..=run]) {
            return Some((Cow::Borrowed(chars), run + 1));
        }
    }
    // Legacy references without a semicolon; longest known prefix wins.
    (1..=run).rev().find_map(|len| {
        table
            .by_name
            .get(&rest[..len])
            .map(|c| (Cow::Borrowed(*c), len))
    })
}

fn match_numeric(bytes: &[u8]) -> Option<(char, usize)> {
    let (radix, start) = match bytes.get(1) {
        Some(b'x' | b'X') => (16u32, 2),
        _ => (10u32, 1),
    };
    let digits = bytes[start..]
        .iter()
        .take_while(|b| (**b as char).is_digit(radix))
        .count();
    if digits == 0 {
        return None;
    }
    let mut value: u32 = 0;
    for &b in &bytes[start..start + digits] {
        let d = (b as char).to_digit(radix).unwrap_or(0);
        value = value.saturating_mul(radix).saturating_add(d);
    }
    let mut consumed = start + digits;
    if bytes.get(consumed) == Some(&b';') {
        consumed += 1;
    }
    let c = match value {
        0 => '\u{FFFD}',
        v => char::from_u32(v).unwrap_or('\u{FFFD}'),
    };
    Some((c, consumed))
}

/// Single reversible encoding layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodeMode {
    /// Every byte as `%XX`.
    PercentAll,
    /// Every byte outside the RFC 3986 unreserved set as `%XX`.
    PercentReserved,
    /// `<>"'&=` as named references.
    EntityNamed,
    /// `<>"'&=` as decimal references.
    EntityNumeric,
}

impl EncodeMode {
    pub const ALL: [EncodeMode; 4] = [
        EncodeMode::PercentAll,
        EncodeMode::PercentReserved,
        EncodeMode::EntityNamed,
        EncodeMode::EntityNumeric,
    ];
}

impl fmt::Display for EncodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncodeMode::PercentAll => "percent-all",
            EncodeMode::PercentReserved => "percent-reserved",
            EncodeMode::EntityNamed => "entity-named",
            EncodeMode::EntityNumeric => "entity-numeric",
        })
    }
}

impl FromStr for EncodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "percent-all" => Ok(EncodeMode::PercentAll),
            "percent-reserved" => Ok(EncodeMode::PercentReserved),
            "entity-named" => Ok(EncodeMode::EntityNamed),
            "entity-numeric" => Ok(EncodeMode::EntityNumeric),
            other => Err(format!("unknown encode mode `{other}`")),
        }
    }
}

const HTML_SIGNIFICANT: &[char] = &['<', '>', '"', '\'', '&', '='];

/// Encode `s` with one layer on top of its canonical form, so that decoding
/// the result reaches the same fixpoint as decoding `s`.
pub fn encode(s: &str, mode: EncodeMode) -> String {
    apply_layer(&canonicalize(s), mode)
}

/// Apply one encoding layer to `s` verbatim.
pub fn apply_layer(s: &str, mode: EncodeMode) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(s.len() * 3);
    match mode {
        EncodeMode::PercentAll => {
            for b in s.bytes() {
                let _ = write!(out, "%{b:02X}");
            }
        }
        EncodeMode::PercentReserved => {
            for b in s.bytes() {
                if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
                    out.push(b as char);
                } else {
                    let _ = write!(out, "%{b:02X}");
                }
            }
        }
        EncodeMode::EntityNamed => {
            for c in s.chars() {
                match c {
                    '<' => out.push_str("&lt;"),
                    '>' => out.push_str("&gt;"),
                    '"' => out.push_str("&quot;"),
                    '\'' => out.push_str("&apos;"),
                    '&' => out.push_str("&amp;"),
                    '=' => out.push_str("&equals;"),
                    c => out.push(c),
                }
            }
        }
        EncodeMode::EntityNumeric => {
            for c in s.chars() {
                if HTML_SIGNIFICANT.contains(&c) {
                    let _ = write!(out, "&#{};", c as u32);
                } else {
                    out.push(c);
                }
            }
        }
    }
    out
}
