//! Offline evaluation harness.
//!
//! Payloads are pushed through sink templates guarded by sanitizer chains.
//! A weak reflection reporter decides whether an attack was "reported
//! successful" and a stricter execution oracle decides whether it really
//! introduced script. From these the false-positive rate and the recall
//! over known-vulnerable sinks are computed.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec;
use crate::profile::{self, ProfileError};
use crate::tokenizer::{tokenize, TokenKind};

pub const PLACEHOLDER: &str = "{INPUT}";
pub const BENIGN_INPUT: &str = "vectormorph0benign";

/// Elements whose content the HTML parser does not tokenize as markup.
const RAW_TEXT_ELEMENTS: [&str; 6] = ["script", "style", "textarea", "title", "xmp", "noscript"];

#[derive(Debug, Error)]
pub enum GauntletError {
    #[error("no sinks to evaluate")]
    NoSinks,
    #[error("no payloads to evaluate")]
    NoPayloads,
    #[error("sink `{id}`: {reason}")]
    InvalidSink { id: String, reason: String },
    #[error(transparent)]
    File(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SanitizerKind {
    StripSubstring,
    RejectSubstring,
    EntityEncodeCharset,
    RegexStrip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizerRule {
    pub kind: SanitizerKind,
    pub pattern: String,
    pub case_sensitive: bool,
}

impl SanitizerRule {
    pub fn new(kind: SanitizerKind, pattern: &str, case_sensitive: bool) -> Self {
        SanitizerRule {
            kind,
            pattern: pattern.to_string(),
            case_sensitive,
        }
    }

    fn regex(&self) -> Result<Regex, regex::Error> {
        RegexBuilder::new(&self.pattern)
            .case_insensitive(!self.case_sensitive)
            .build()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pattern.is_empty() {
            return Err("sanitizer pattern must not be empty".into());
        }
        if self.kind == SanitizerKind::RegexStrip {
            self.regex().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn matches_at(s: &str, i: usize, pat: &str, case_sensitive: bool) -> bool {
    let Some(hay) = s.as_bytes().get(i..i + pat.len()) else {
        return false;
    };
    if case_sensitive {
        hay == pat.as_bytes()
    } else {
        hay.eq_ignore_ascii_case(pat.as_bytes())
    }
}

fn contains(s: &str, pat: &str, case_sensitive: bool) -> bool {
    s.char_indices()
        .any(|(i, _)| matches_at(s, i, pat, case_sensitive))
}

/// Remove non-overlapping occurrences, scanning left to right once.
fn strip(s: &str, pat: &str, case_sensitive: bool) -> String {
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if matches_at(s, i, pat, case_sensitive) {
            i += pat.len();
            continue;
        }
        let c = s[i..].chars().next().expect("in bounds");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

/// Apply `rules` in order. A reject rule that fires halts the chain.
pub fn sanitize(input: &str, rules: &[SanitizerRule]) -> (String, bool) {
    let mut s = input.to_string();
    for rule in rules {
        match rule.kind {
            SanitizerKind::StripSubstring => s = strip(&s, &rule.pattern, rule.case_sensitive),
            SanitizerKind::RejectSubstring => {
                if contains(&s, &rule.pattern, rule.case_sensitive) {
                    return (s, true);
                }
            }
            SanitizerKind::EntityEncodeCharset => {
                s = s
                    .chars()
                    .map(|c| {
                        let hit = if rule.case_sensitive {
                            rule.pattern.contains(c)
                        } else {
                            rule.pattern.chars().any(|p| p.eq_ignore_ascii_case(&c))
                        };
                        if hit {
                            format!("&#{};", c as u32)
                        } else {
                            c.to_string()
                        }
                    })
                    .collect();
            }
            SanitizerKind::RegexStrip => {
                if let Ok(re) = rule.regex() {
                    s = re.replace_all(&s, "").into_owned();
                }
            }
        }
    }
    (s, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkContext {
    AttrDoubleQuoted,
    AttrSingleQuoted,
    Text,
    ScriptString,
    Comment,
}

impl fmt::Display for SinkContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SinkContext::AttrDoubleQuoted => "attr-double-quoted",
            SinkContext::AttrSingleQuoted => "attr-single-quoted",
            SinkContext::Text => "text",
            SinkContext::ScriptString => "script-string",
            SinkContext::Comment => "comment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkTemplate {
    pub id: String,
    pub template: String,
    pub context: SinkContext,
    pub sanitizers: Vec<SanitizerRule>,
    pub known_vulnerable: bool,
}

impl SinkTemplate {
    pub fn render(&self, input: &str) -> String {
        self.template.replacen(PLACEHOLDER, input, 1)
    }

    pub fn validate(&self) -> Result<(), GauntletError> {
        let invalid = |reason: String| GauntletError::InvalidSink {
            id: self.id.clone(),
            reason,
        };
        if self.template.matches(PLACEHOLDER).count() != 1 {
            return Err(invalid(format!("template needs exactly one {PLACEHOLDER}")));
        }
        for rule in &self.sanitizers {
            rule.validate().map_err(invalid)?;
        }
        match detect_context(&self.template) {
            Some(c) if c == self.context => Ok(()),
            Some(c) => Err(invalid(format!(
                "declared context {} but the placeholder sits in {c}",
                self.context
            ))),
            None => Err(invalid("placeholder is not in a supported context".into())),
        }
    }
}

/// Context of the placeholder, found by tokenizing the template filled
/// with a benign marker.
pub fn detect_context(template: &str) -> Option<SinkContext> {
    let page = template.replacen(PLACEHOLDER, BENIGN_INPUT, 1);
    let seq = tokenize(&page);
    let pos = seq
        .tokens
        .iter()
        .position(|t| t.raw.contains(BENIGN_INPUT))?;
    let tok = &seq.tokens[pos];
    match tok.symbol.kind() {
        TokenKind::AttrValue if tok.raw.starts_with('"') => Some(SinkContext::AttrDoubleQuoted),
        TokenKind::AttrValue if tok.raw.starts_with('\'') => Some(SinkContext::AttrSingleQuoted),
        TokenKind::Comment => Some(SinkContext::Comment),
        TokenKind::PlainText => {
            let enclosing = seq.tokens[..pos]
                .iter()
                .rev()
                .find(|t| matches!(t.symbol.kind(), TokenKind::StartTag | TokenKind::EndTag));
            match enclosing {
                Some(t)
                    if t.symbol.kind() == TokenKind::StartTag && t.symbol.name() == "script" =>
                {
                    Some(SinkContext::ScriptString)
                }
                _ => Some(SinkContext::Text),
            }
        }
        _ => None,
    }
}

/// Constructs in `page` that would start script: script elements opened in
/// data context, `on*` attributes and `javascript:` attribute values.
pub fn execution_signals(page: &str) -> usize {
    let seq = tokenize(page);
    let mut signals = 0;
    let mut raw_text: Option<&str> = None;
    for t in &seq.tokens {
        let name = t.symbol.name();
        if let Some(open) = raw_text {
            if t.symbol.kind() == TokenKind::EndTag && name == open {
                raw_text = None;
            }
            continue;
        }
        match t.symbol.kind() {
            TokenKind::StartTag => {
                if name == "script" {
                    signals += 1;
                }
                raw_text = RAW_TEXT_ELEMENTS.iter().copied().find(|e| *e == name);
            }
            TokenKind::Attribute if name.starts_with("on") => signals += 1,
            TokenKind::AttrValue => {
                let v = t.raw.trim_start_matches(['"', '\'']).trim_start();
                if v.len() >= 11 && v[..11].eq_ignore_ascii_case("javascript:") {
                    signals += 1;
                }
            }
            _ => {}
        }
    }
    signals
}

fn tag_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^>]*>").expect("valid regex"))
}

/// The body with its markup removed, e.g. `alert(123)` for
/// `<script>alert(123)</script>`; bodies that are all markup fall back to
/// the body without angle brackets.
pub fn textual_core(body: &str) -> String {
    let core = tag_pattern().replace_all(body, "");
    if core.trim().is_empty() {
        body.replace(['<', '>'], "")
    } else {
        core.into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub reported: bool,
    pub executed: bool,
}

/// Judge a page on its own: any execution signal counts.
pub fn judge(page: &str, body: &str) -> Judgement {
    judge_against(page, 0, body)
}

/// Judge a page relative to the signals its template already carries.
pub fn judge_against(page: &str, baseline_signals: usize, body: &str) -> Judgement {
    let core = textual_core(body);
    Judgement {
        reported: !core.is_empty() && page.contains(&core),
        executed: execution_signals(page) > baseline_signals,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkOutcome {
    pub id: String,
    pub context: SinkContext,
    pub known_vulnerable: bool,
    pub payloads: usize,
    pub rejected: usize,
    pub reported: usize,
    pub executed: usize,
    pub true_positives: usize,
    pub executed_unreported: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sinks: Vec<SinkOutcome>,
    pub tp: usize,
    pub fp: usize,
    pub reported_successful: usize,
    pub fp_rate: f64,
    pub found_vulnerabilities: usize,
    pub total_vulnerabilities: usize,
    pub recall: f64,
}

impl EvaluationReport {
    /// Report arithmetic from raw counts; rates are 0 when undefined.
    pub fn from_counts(tp: usize, fp: usize, found: usize, total: usize) -> Self {
        let reported = tp + fp;
        EvaluationReport {
            sinks: Vec::new(),
            tp,
            fp,
            reported_successful: reported,
            fp_rate: if reported == 0 {
                0.0
            } else {
                fp as f64 / reported as f64
            },
            found_vulnerabilities: found,
            total_vulnerabilities: total,
            recall: if total == 0 {
                0.0
            } else {
                found as f64 / total as f64
            },
        }
    }

    pub fn fp_rate_display(&self) -> String {
        format!("{:.1}%", self.fp_rate * 100.0)
    }

    pub fn recall_display(&self) -> String {
        format!("{:.0}%", self.recall * 100.0)
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reported successful: {}", self.reported_successful)?;
        writeln!(f, "true positives: {}", self.tp)?;
        writeln!(f, "false positives: {}", self.fp)?;
        writeln!(f, "fp rate: {}", self.fp_rate_display())?;
        writeln!(
            f,
            "found vulnerabilities: {} / {}",
            self.found_vulnerabilities, self.total_vulnerabilities
        )?;
        writeln!(f, "recall: {}", self.recall_display())?;
        if !self.sinks.is_empty() {
            writeln!(f)?;
            writeln!(
                f,
                "sink\tcontext\tvulnerable\tpayloads\trejected\treported\texecuted\ttp\texecuted_unreported"
            )?;
        }
        for s in &self.sinks {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.id,
                s.context,
                s.known_vulnerable,
                s.payloads,
                s.rejected,
                s.reported,
                s.executed,
                s.true_positives,
                s.executed_unreported
            )?;
        }
        Ok(())
    }
}

/// Payloads reach the sink URL-decoded once, as a query parameter would.
fn transport_decode(payload: &str) -> String {
    codec::utf8_passthrough(&codec::percent_decode(payload.as_bytes()))
}

/// Run every payload against every sink.
pub fn evaluate(
    payloads: &[String],
    sinks: &[SinkTemplate],
    body: &str,
) -> Result<EvaluationReport, GauntletError> {
    if sinks.is_empty() {
        return Err(GauntletError::NoSinks);
    }
    if payloads.is_empty() {
        return Err(GauntletError::NoPayloads);
    }
    for s in sinks {
        s.validate()?;
    }
    let delivered: Vec<String> = payloads.iter().map(|p| transport_decode(p)).collect();
    let outcomes: Vec<SinkOutcome> = sinks
        .iter()
        .map(|sink| {
            let baseline = execution_signals(&sink.render(BENIGN_INPUT));
            let verdicts: Vec<Option<Judgement>> = delivered
                .par_iter()
                .map(|p| {
                    let (clean, rejected) = sanitize(p, &sink.sanitizers);
                    (!rejected).then(|| judge_against(&sink.render(&clean), baseline, body))
                })
                .collect();
            let mut o = SinkOutcome {
                id: sink.id.clone(),
                context: sink.context,
                known_vulnerable: sink.known_vulnerable,
                payloads: payloads.len(),
                rejected: 0,
                reported: 0,
                executed: 0,
                true_positives: 0,
                executed_unreported: 0,
            };
            for v in verdicts {
                let Some(j) = v else {
                    o.rejected += 1;
                    continue;
                };
                o.reported += j.reported as usize;
                o.executed += j.executed as usize;
                o.true_positives += (j.reported && j.executed) as usize;
                o.executed_unreported += (!j.reported && j.executed) as usize;
            }
            o
        })
        .collect();
    let tp = outcomes.iter().map(|o| o.true_positives).sum::<usize>();
    let reported = outcomes.iter().map(|o| o.reported).sum::<usize>();
    let found = outcomes
        .iter()
        .filter(|o| o.known_vulnerable && o.executed > 0)
        .count();
    let total = outcomes.iter().filter(|o| o.known_vulnerable).count();
    let mut report = EvaluationReport::from_counts(tp, reported - tp, found, total);
    report.sinks = outcomes;
    Ok(report)
}

/// The shipped six-sink suite: four weak sinks, two hardened ones.
pub fn default_suite() -> Vec<SinkTemplate> {
    use SanitizerKind::*;
    let encode_all = || vec![SanitizerRule::new(EntityEncodeCharset, "<>&\"'", true)];
    vec![
        SinkTemplate {
            id: "attr-dq".into(),
            template: "<form action=\"/search\"><input type=\"text\" name=\"keyword\" value=\"{INPUT}\"></form>".into(),
            context: SinkContext::AttrDoubleQuoted,
            sanitizers: vec![],
            known_vulnerable: true,
        },
        SinkTemplate {
            id: "attr-sq".into(),
            template: "<a href='/profile' title='{INPUT}'>profile</a>".into(),
            context: SinkContext::AttrSingleQuoted,
            sanitizers: vec![SanitizerRule::new(RejectSubstring, "javascript:", false)],
            known_vulnerable: true,
        },
        SinkTemplate {
            id: "text-weak".into(),
            template: "<p>Results for {INPUT}</p>".into(),
            context: SinkContext::Text,
            sanitizers: vec![SanitizerRule::new(RegexStrip, "<script[^>]*>", false)],
            known_vulnerable: true,
        },
        SinkTemplate {
            id: "script-string".into(),
            template: "<script>var q = '{INPUT}';</script>".into(),
            context: SinkContext::ScriptString,
            sanitizers: vec![SanitizerRule::new(StripSubstring, "</script", true)],
            known_vulnerable: true,
        },
        SinkTemplate {
            id: "text-hardened".into(),
            template: "<div class=\"result\">{INPUT}</div>".into(),
            context: SinkContext::Text,
            sanitizers: encode_all(),
            known_vulnerable: false,
        },
        SinkTemplate {
            id: "comment-hardened".into(),
            template: "<!-- last search: {INPUT} -->".into(),
            context: SinkContext::Comment,
            sanitizers: encode_all(),
            known_vulnerable: false,
        },
    ]
}

pub fn suite_to_json(sinks: &[SinkTemplate]) -> Value {
    json!({
        "meta": { "format_version": profile::FORMAT_VERSION },
        "sinks": serde_json::to_value(sinks).expect("sinks serialize"),
    })
}

pub fn save_suite(sinks: &[SinkTemplate], path: &Path) -> Result<(), GauntletError> {
    profile::write_atomic(path, profile::to_text(&suite_to_json(sinks)).as_bytes())?;
    Ok(())
}

pub fn load_suite(path: &Path) -> Result<Vec<SinkTemplate>, GauntletError> {
    let text = std::fs::read_to_string(path).map_err(|e| ProfileError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    suite_from_str(&text)
}

pub fn suite_from_str(text: &str) -> Result<Vec<SinkTemplate>, GauntletError> {
    let format = |m: String| GauntletError::File(ProfileError::Format(m));
    let doc: Value =
        serde_json::from_str(text).map_err(|e| format(format!("line {}: {e}", e.line())))?;
    let version = doc
        .get("meta")
        .and_then(|m| m.get("format_version"))
        .and_then(Value::as_u64);
    if version != Some(profile::FORMAT_VERSION) {
        return Err(format(format!(
            "unsupported sink suite format_version {version:?}"
        )));
    }
    let sinks: Vec<SinkTemplate> =
        serde_json::from_value(doc.get("sinks").cloned().unwrap_or(Value::Null))
            .map_err(|e| format(format!("sinks: {e}")))?;
    for s in &sinks {
        s.validate()?;
    }
    Ok(sinks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use SanitizerKind::*;

    #[test]
    fn sanitizer_examples() {
        let rule = SanitizerRule::new(StripSubstring, "<script", true);
        assert_eq!(
            sanitize("<ScRiPt>alert(1)", std::slice::from_ref(&rule)).0,
            "<ScRiPt>alert(1)"
        );
        assert_eq!(
            sanitize("<script>alert(1)", std::slice::from_ref(&rule)).0,
            ">alert(1)"
        );
        let enc = SanitizerRule::new(EntityEncodeCharset, "<>&", true);
        assert_eq!(sanitize("a<b", &[enc]).0, "a&#60;b");
        let insensitive = SanitizerRule::new(StripSubstring, "<script", false);
        assert_eq!(sanitize("<ScRiPt>x", &[insensitive]).0, ">x");
    }

    #[test]
    fn reject_halts_chain() {
        let rules = [
            SanitizerRule::new(RejectSubstring, "alert", false),
            SanitizerRule::new(StripSubstring, "<", true),
        ];
        assert_eq!(sanitize("<b>ALERT", &rules), ("<b>ALERT".to_string(), true));
        assert_eq!(sanitize("<b>", &rules), ("b>".to_string(), false));
    }

    #[test]
    fn strip_is_single_pass() {
        let rule = SanitizerRule::new(StripSubstring, "<script", true);
        assert_eq!(sanitize("<scr<scriptipt>", &[rule]).0, "<script>");
    }

    #[test]
    fn judge_examples() {
        let body = "<script>alert(123)</script>";
        assert_eq!(
            judge("<p><script>alert(123)</script></p>", body),
            Judgement {
                reported: true,
                executed: true
            }
        );
        assert_eq!(
            judge("<p>&#60;script&#62;alert(123)&#60;/script&#62;</p>", body),
            Judgement {
                reported: true,
                executed: false
            }
        );
        assert_eq!(
            judge("<p>nothing</p>", body),
            Judgement {
                reported: false,
                executed: false
            }
        );
    }

    #[test]
    fn raw_text_hides_markup() {
        assert_eq!(
            execution_signals("<textarea><script>x</script></textarea>"),
            0
        );
        assert_eq!(execution_signals("<script>'<img onerror=x>'</script>"), 1);
        assert_eq!(
            execution_signals("<script>'</ScRiPt><script>x'</script>"),
            2
        );
        assert_eq!(execution_signals("<a href=\" JavaScript:x\">"), 1);
        assert_eq!(execution_signals("<svg/onload=alert(1)>"), 1);
    }

    #[test]
    fn contexts_match_templates() {
        for s in default_suite() {
            s.validate().unwrap();
        }
        assert_eq!(detect_context("<b>{INPUT}</b>"), Some(SinkContext::Text));
        assert_eq!(detect_context("<a x={INPUT}>"), None);
    }

    #[test]
    fn report_arithmetic() {
        let r = EvaluationReport::from_counts(435, 493, 13, 13);
        assert_eq!(r.reported_successful, 928);
        assert_eq!(r.fp_rate_display(), "53.1%");
        assert_eq!(r.recall_display(), "100%");
        let r = EvaluationReport::from_counts(0, 0, 14, 18);
        assert_eq!(r.fp_rate, 0.0);
        assert_eq!(r.recall_display(), "78%");
    }

    #[test]
    fn case_sensitive_strip_scenario() {
        let sink = default_suite()
            .into_iter()
            .find(|s| s.id == "script-string")
            .unwrap();
        let body = "<script>alert(123)</script>";
        let lower = format!("</script>{body}");
        let mixed = format!("</ScRiPt>{body}");
        let r = evaluate(&[lower], std::slice::from_ref(&sink), body).unwrap();
        assert_eq!(r.sinks[0].executed, 0);
        let r = evaluate(&[mixed], &[sink], body).unwrap();
        assert_eq!(r.sinks[0].executed, 1);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn suite_round_trip() {
        let suite = default_suite();
        let text = profile::to_text(&suite_to_json(&suite));
        assert_eq!(suite_from_str(&text).unwrap(), suite);
    }
}
