//! Attack location inside an XSS URL.
//!
//! A URL is split into candidate values (query pair values, the fragment,
//! and path segments that look like markup once decoded). Each candidate
//! is scored by six weighted features and the best one is taken as the
//! attack.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;

pub const NUM_FEATURES: usize = 6;

pub const SCRIPT_KEYWORDS: [&str; 9] = [
    "script",
    "javascript",
    "onerror",
    "onload",
    "iframe",
    "img",
    "svg",
    "eval",
    "alert",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocatorError {
    #[error("no candidate value in `{0}`")]
    NoCandidates(String),
    #[error("invalid feature weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights(pub [f64; NUM_FEATURES]);

impl Default for Weights {
    fn default() -> Self {
        Weights([3.0, 3.0, 2.0, 3.0, 1.0, 1.0])
    }
}

impl Weights {
    pub fn new(w: [f64; NUM_FEATURES]) -> Result<Self, LocatorError> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LocatorError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(Weights(w))
    }

    pub fn dot(&self, features: &[f64; NUM_FEATURES]) -> f64 {
        self.0.iter().zip(features).map(|(w, f)| w * f).sum()
    }
}

impl FromStr for Weights {
    type Err = LocatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != NUM_FEATURES {
            return Err(LocatorError::InvalidWeights(format!(
                "expected {NUM_FEATURES} comma-separated values, got {}",
                parts.len()
            )));
        }
        let mut w = [0.0; NUM_FEATURES];
        for (slot, p) in w.iter_mut().zip(parts) {
            *slot = p
                .parse()
                .map_err(|_| LocatorError::InvalidWeights(format!("`{p}` is not a number")))?;
        }
        Weights::new(w)
    }
}

impl fmt::Display for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    Query,
    Path,
    Fragment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateValue {
    /// Decoded parameter name; empty for path and fragment candidates.
    pub param_name: String,
    pub raw: String,
    pub decoded: String,
    pub features: [f64; NUM_FEATURES],
    pub score: f64,
    pub source: CandidateSource,
    /// Byte range of `raw` inside the URL.
    pub span: Range<usize>,
    /// Undecoded parameter name as written in the URL.
    pub param_raw: String,
    /// Whether the pair contained `=`.
    pub has_equals: bool,
    /// Separator (`&` or `;`) preceding this pair; `None` for the first pair.
    pub separator: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedAttack {
    pub source_url: String,
    pub candidate: CandidateValue,
    pub all_candidates: Vec<CandidateValue>,
}

fn handler_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bon[a-z]+\s*=").expect("valid regex"))
}

fn entity_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^&(#[0-9]+;?|#[xX][0-9a-fA-F]+;?|[A-Za-z][A-Za-z0-9]*;)").expect("valid regex")
    })
}

/// Six feature values, each in [0, 1].
pub fn score_features(decoded: &str) -> [f64; NUM_FEATURES] {
    let lower = decoded.to_lowercase();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let chars = decoded.chars().count() as f64;
    let symbols = decoded.chars().filter(|c| !c.is_alphanumeric()).count() as f64;
    [
        flag(decoded.contains(['<', '>'])),
        flag(SCRIPT_KEYWORDS.iter().any(|k| lower.contains(k))),
        flag(decoded.contains(['"', '\''])),
        flag(handler_pattern().is_match(decoded)),
        (chars / 64.0).min(1.0),
        (symbols / 16.0).min(1.0),
    ]
}

fn decode_value(raw: &str, plus_is_space: bool) -> String {
    if plus_is_space && raw.contains('+') {
        codec::canonicalize(&raw.replace('+', " "))
    } else {
        codec::canonicalize(raw)
    }
}

fn suspicious(decoded: &str) -> bool {
    decoded.contains(['<', '>', '"', '\''])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Locator {
    pub weights: Weights,
}

impl Locator {
    pub fn new(weights: Weights) -> Self {
        Locator { weights }
    }

    fn candidate(
        &self,
        url: &str,
        span: Range<usize>,
        source: CandidateSource,
        param_raw: &str,
        has_equals: bool,
        separator: Option<char>,
    ) -> CandidateValue {
        let raw = url[span.clone()].to_string();
        let decoded = decode_value(&raw, source == CandidateSource::Query);
        let features = score_features(&decoded);
        CandidateValue {
            param_name: decode_value(param_raw, true),
            score: self.weights.dot(&features),
            raw,
            decoded,
            features,
            source,
            span,
            param_raw: param_raw.to_string(),
            has_equals,
            separator,
        }
    }

    /// Candidates in URL order.
    pub fn split_candidates(&self, url: &str) -> Result<Vec<CandidateValue>, LocatorError> {
        let (before_fragment, fragment) = match url.find('#') {
            Some(i) => (&url[..i], Some(i + 1)),
            None => (url, None),
        };
        let (path_end, query) = match before_fragment.find('?') {
            Some(i) => (i, Some(i + 1..before_fragment.len())),
            None => (before_fragment.len(), None),
        };

        let mut out = Vec::new();
        let path_start = match url[..path_end].find("://") {
            Some(i) => url[i + 3..path_end]
                .find('/')
                .map_or(path_end, |j| i + 3 + j),
            None => 0,
        };
        self.path_candidates(url, path_start..path_end, &mut out);
        if let Some(q) = query {
            self.query_candidates(url, q, &mut out);
        }
        if let Some(f) = fragment {
            out.push(self.candidate(
                url,
                f..url.len(),
                CandidateSource::Fragment,
                "",
                false,
                None,
            ));
        }
        if out.is_empty() {
            return Err(LocatorError::NoCandidates(url.to_string()));
        }
        Ok(out)
    }

    /// Suspicious segments; runs of adjacent suspicious segments form one
    /// candidate because markup such as `</script>` itself contains `/`.
    fn path_candidates(&self, url: &str, path: Range<usize>, out: &mut Vec<CandidateValue>) {
        let mut run: Option<Range<usize>> = None;
        let mut pos = path.start;
        let mut segments = Vec::new();
        for seg in url[path.clone()].split('/') {
            segments.push(pos..pos + seg.len());
            pos += seg.len() + 1;
        }
        for seg in segments {
            let hit = !seg.is_empty() && suspicious(&decode_value(&url[seg.clone()], false));
            match (&mut run, hit) {
                (Some(r), true) => r.end = seg.end,
                (None, true) => run = Some(seg),
                (Some(_), false) => {
                    let r = run.take().expect("open run");
                    out.push(self.candidate(url, r, CandidateSource::Path, "", false, None));
                }
                (None, false) => {}
            }
        }
        if let Some(r) = run {
            out.push(self.candidate(url, r, CandidateSource::Path, "", false, None));
        }
    }

    fn query_candidates(&self, url: &str, query: Range<usize>, out: &mut Vec<CandidateValue>) {
        let bytes = url.as_bytes();
        let mut pairs: Vec<(Range<usize>, Option<char>)> = Vec::new();
        let mut start = query.start;
        let mut sep = None;
        let mut i = query.start;
        while i < query.end {
            match bytes[i] {
                b'&' => {
                    if let Some(m) = entity_pattern().find(&url[i..query.end]) {
                        i += m.end();
                        continue;
                    }
                    pairs.push((start..i, sep));
                    sep = Some('&');
                    start = i + 1;
                }
                b';' => {
                    pairs.push((start..i, sep));
                    sep = Some(';');
                    start = i + 1;
                }
                _ => {}
            }
            i += 1;
        }
        pairs.push((start..query.end, sep));
        for (pair, sep) in pairs {
            let text = &url[pair.clone()];
            let (name, value, has_equals) = match text.find('=') {
                Some(eq) => (&text[..eq], pair.start + eq + 1..pair.end, true),
                None => (text, pair.end..pair.end, false),
            };
            out.push(self.candidate(url, value, CandidateSource::Query, name, has_equals, sep));
        }
    }

    /// The best-scoring candidate; ties go to the earliest.
    pub fn locate_attack(&self, url: &str) -> Result<LocatedAttack, LocatorError> {
        let all = self.split_candidates(url)?;
        let mut best = 0;
        for (i, c) in all.iter().enumerate() {
            if c.score > all[best].score {
                best = i;
            }
        }
        Ok(LocatedAttack {
            source_url: url.to_string(),
            candidate: all[best].clone(),
            all_candidates: all,
        })
    }
}

/// Rebuild the query string (without `?`) from its candidates.
pub fn reassemble_query(candidates: &[CandidateValue]) -> String {
    let mut out = String::new();
    for c in candidates
        .iter()
        .filter(|c| c.source == CandidateSource::Query)
    {
        if let Some(s) = c.separator {
            out.push(s);
        }
        out.push_str(&c.param_raw);
        if c.has_equals {
            out.push('=');
        }
        out.push_str(&c.raw);
    }
    out
}

pub fn split_candidates(url: &str) -> Result<Vec<CandidateValue>, LocatorError> {
    Locator::default().split_candidates(url)
}

pub fn locate_attack(url: &str) -> Result<LocatedAttack, LocatorError> {
    Locator::default().locate_attack(url)
}
