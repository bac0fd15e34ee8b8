//! Mutated attack generation from a learned profile.
//!
//! The seed attack is tokenized and aligned to the model by its Viterbi
//! path. Each state on the path then draws a fresh symbol from its emission
//! row and a concrete substring for that symbol from the raw corpus. One
//! plain-text slot is replaced by the attack body. Candidates that do not
//! survive validation are redrawn.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, EncodeMode};
use crate::hmm::{HmmError, StateId, SymbolId};
use crate::profile::AttackVectorProfile;
use crate::tokenizer::{tokenize, TokenKind, TokenSequence, TokenSymbol};

pub const DEFAULT_BODY: &str = "<script>alert(123)</script>";
pub const FREE_WALK_CAP: usize = 64;
pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("seed attack has no tokens")]
    EmptySeed,
    #[error("seed tokens outside the profile alphabet: {}", .0.join(", "))]
    SymbolOutOfAlphabet(Vec<String>),
    #[error("the model assigns the seed zero probability")]
    NoPath,
    #[error("no raw substring recorded for {0}")]
    EmptyCorpusForSymbol(TokenSymbol),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("no valid attack found in {attempts} attempts")]
    NoValidCandidate { attempts: usize },
    #[error("the profile model has no states")]
    EmptyModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    PathResample,
    FreeWalk,
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenerationMode::PathResample => "path",
            GenerationMode::FreeWalk => "walk",
        })
    }
}

impl FromStr for GenerationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "path" | "path-resample" => Ok(GenerationMode::PathResample),
            "walk" | "free-walk" => Ok(GenerationMode::FreeWalk),
            other => Err(format!("unknown generation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Obfuscation {
    None,
    Percent,
    Entity,
}

impl Obfuscation {
    pub const ALL: [Obfuscation; 3] =
        [Obfuscation::None, Obfuscation::Percent, Obfuscation::Entity];

    pub fn encode_mode(self) -> Option<EncodeMode> {
        match self {
            Obfuscation::None => None,
            Obfuscation::Percent => Some(EncodeMode::PercentReserved),
            Obfuscation::Entity => Some(EncodeMode::EntityNumeric),
        }
    }

    pub fn apply(self, text: &str) -> String {
        match self.encode_mode() {
            Some(mode) => codec::encode(text, mode),
            None => text.to_string(),
        }
    }
}

impl fmt::Display for Obfuscation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Obfuscation::None => "none",
            Obfuscation::Percent => "percent",
            Obfuscation::Entity => "entity",
        })
    }
}

impl FromStr for Obfuscation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Obfuscation::None),
            "percent" => Ok(Obfuscation::Percent),
            "entity" => Ok(Obfuscation::Entity),
            other => Err(format!("unknown obfuscation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub seed_attack: String,
    pub body: String,
    pub count: usize,
    pub mode: GenerationMode,
    pub obfuscation: Obfuscation,
    pub rng_seed: u64,
    /// Redraws allowed per requested attack.
    pub max_attempts: usize,
}

impl GenerationRequest {
    pub fn new(seed_attack: &str) -> Self {
        GenerationRequest {
            seed_attack: seed_attack.to_string(),
            body: DEFAULT_BODY.to_string(),
            count: 1,
            mode: GenerationMode::PathResample,
            obfuscation: Obfuscation::None,
            rng_seed: 0,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.count == 0 {
            return Err(GeneratorError::InvalidRequest(
                "count must be at least 1".into(),
            ));
        }
        if self.body.is_empty() {
            return Err(GeneratorError::InvalidRequest(
                "body must not be empty".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(GeneratorError::InvalidRequest(
                "max_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutatedAttack {
    /// Emitted payload, obfuscated when requested.
    pub text: String,
    /// The payload before obfuscation; always a decoding fixpoint.
    pub canonical: String,
    /// Tokens of `canonical`.
    pub tokens: TokenSequence,
    /// Viterbi path of `tokens`.
    pub state_path: Vec<StateId>,
    /// Log-likelihood of `tokens` under the profile model.
    pub log_prob: f64,
    /// Byte range of the body inside `canonical`.
    pub body_span: Range<usize>,
    pub obfuscation: Obfuscation,
}

/// Map unknown seed symbols to their kind's class symbol when the alphabet
/// has one.
fn resolve_symbols(
    profile: &AttackVectorProfile,
    seq: &TokenSequence,
) -> Result<Vec<SymbolId>, GeneratorError> {
    let alphabet = profile.alphabet();
    let mut ids = Vec::with_capacity(seq.len());
    let mut missing = Vec::new();
    for t in &seq.tokens {
        let id = alphabet
            .get(&t.symbol)
            .or_else(|| alphabet.get(&TokenSymbol::class(t.symbol.kind())));
        match id {
            Some(id) => ids.push(id),
            None => missing.push(format!("{} ({:?})", t.symbol, t.raw)),
        }
    }
    if !missing.is_empty() {
        return Err(GeneratorError::SymbolOutOfAlphabet(missing));
    }
    Ok(ids)
}

/// Viterbi path of the decoded, tokenized seed.
pub fn derive_path(
    profile: &AttackVectorProfile,
    seed: &str,
) -> Result<(Vec<StateId>, TokenSequence), GeneratorError> {
    let seq = tokenize(&codec::canonicalize(seed));
    if seq.is_empty() {
        return Err(GeneratorError::EmptySeed);
    }
    let ids = resolve_symbols(profile, &seq)?;
    match profile.model.viterbi_ids(&ids) {
        Ok(v) => Ok((v.path, seq)),
        Err(HmmError::NoPath) => Err(GeneratorError::NoPath),
        Err(e) => Err(GeneratorError::InvalidRequest(e.to_string())),
    }
}

/// Renders sampled tokens back into markup.
#[derive(Default)]
struct Renderer {
    out: String,
    in_tag: bool,
    body_span: Option<Range<usize>>,
}

impl Renderer {
    fn close(&mut self) {
        if self.in_tag {
            self.out.push('>');
            self.in_tag = false;
        }
    }

    fn push(&mut self, kind: TokenKind, raw: &str) {
        match kind {
            TokenKind::StartTag => {
                self.close();
                self.out.push('<');
                self.out.push_str(raw);
                self.in_tag = true;
            }
            TokenKind::EndTag => {
                self.close();
                self.out.push_str("</");
                self.out.push_str(raw);
                self.in_tag = true;
            }
            TokenKind::Attribute => {
                if !raw.starts_with('/') {
                    self.out.push(' ');
                }
                self.out.push_str(raw);
            }
            TokenKind::AttrValue => {
                self.out.push('=');
                self.out.push_str(raw);
            }
            TokenKind::PlainText => {
                self.close();
                self.out.push_str(raw);
            }
            TokenKind::Comment => {
                self.close();
                self.out.push_str("<!--");
                self.out.push_str(raw);
                self.out.push_str("-->");
            }
        }
    }

    fn push_body(&mut self, body: &str) {
        self.close();
        let start = self.out.len();
        self.out.push_str(body);
        self.body_span = Some(start..self.out.len());
    }

    fn finish(mut self) -> (String, Option<Range<usize>>) {
        self.close();
        (self.out, self.body_span)
    }
}

struct Sampler<'p> {
    profile: &'p AttackVectorProfile,
    emit: HashMap<StateId, (Vec<SymbolId>, WeightedIndex<f64>)>,
    trans: HashMap<StateId, (Vec<StateId>, WeightedIndex<f64>)>,
    raws: HashMap<SymbolId, (Vec<&'p str>, WeightedIndex<u64>)>,
}

impl<'p> Sampler<'p> {
    fn new(profile: &'p AttackVectorProfile) -> Self {
        Sampler {
            profile,
            emit: HashMap::new(),
            trans: HashMap::new(),
            raws: HashMap::new(),
        }
    }

    fn symbol(&mut self, state: StateId, rng: &mut ChaCha8Rng) -> SymbolId {
        let model = &self.profile.model;
        let (keys, dist) = self.emit.entry(state).or_insert_with(|| {
            let row = model.state(state).expect("path state exists").emit.probs();
            let keys: Vec<SymbolId> = row.keys().copied().collect();
            let dist = WeightedIndex::new(row.values().copied()).expect("validated emission row");
            (keys, dist)
        });
        keys[dist.sample(rng)]
    }

    fn next_state(&mut self, state: StateId, rng: &mut ChaCha8Rng) -> StateId {
        let model = &self.profile.model;
        let (keys, dist) = self.trans.entry(state).or_insert_with(|| {
            let row = if state == StateId::START {
                model.init().probs()
            } else {
                model.state(state).expect("walk state exists").trans.probs()
            };
            let keys: Vec<StateId> = row.keys().copied().collect();
            let dist = WeightedIndex::new(row.values().copied()).expect("validated transition row");
            (keys, dist)
        });
        keys[dist.sample(rng)]
    }

    fn raw(&mut self, sym: SymbolId, rng: &mut ChaCha8Rng) -> Result<&'p str, GeneratorError> {
        if !self.raws.contains_key(&sym) {
            let symbol = self.profile.alphabet().symbol(sym);
            let entries = self
                .profile
                .corpus
                .raws(symbol)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| GeneratorError::EmptyCorpusForSymbol(symbol.clone()))?;
            let keys: Vec<&'p str> = entries.keys().map(String::as_str).collect();
            let dist = WeightedIndex::new(entries.values().copied())
                .map_err(|_| GeneratorError::EmptyCorpusForSymbol(symbol.clone()))?;
            self.raws.insert(sym, (keys, dist));
        }
        let (keys, dist) = &self.raws[&sym];
        Ok(keys[dist.sample(rng)])
    }

    /// Symbols along a START-to-END random walk, at most `FREE_WALK_CAP` long.
    fn walk(&mut self, rng: &mut ChaCha8Rng) -> Vec<StateId> {
        let mut path = Vec::new();
        let mut s = self.next_state(StateId::START, rng);
        while s != StateId::END && path.len() < FREE_WALK_CAP {
            path.push(s);
            s = self.next_state(s, rng);
        }
        path
    }

    fn draft(
        &mut self,
        path: &[StateId],
        body: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<(String, Range<usize>), GeneratorError> {
        let mut drawn = Vec::with_capacity(path.len());
        for &s in path {
            let sym = self.symbol(s, rng);
            drawn.push((sym, self.raw(sym, rng)?));
        }
        let alphabet = self.profile.alphabet();
        let slots: Vec<usize> = drawn
            .iter()
            .enumerate()
            .filter(|(_, (s, _))| alphabet.symbol(*s).kind() == TokenKind::PlainText)
            .map(|(i, _)| i)
            .collect();
        let slot = (!slots.is_empty()).then(|| slots[rng.random_range(0..slots.len())]);
        let mut r = Renderer::default();
        for (i, (sym, raw)) in drawn.iter().enumerate() {
            if Some(i) == slot {
                r.push_body(body);
            } else {
                r.push(alphabet.symbol(*sym).kind(), raw);
            }
        }
        if slot.is_none() {
            r.push_body(body);
        }
        let (text, span) = r.finish();
        Ok((text, span.expect("body always placed")))
    }
}

/// Accept only canonical texts holding the body once that the model can
/// produce.
fn validate_draft(
    profile: &AttackVectorProfile,
    text: &str,
    body: &str,
) -> Option<(TokenSequence, Vec<StateId>, f64)> {
    if text.matches(body).count() != 1 {
        return None;
    }
    if codec::canonicalize(text) != text {
        return None;
    }
    let tokens = tokenize(text);
    let ids = profile.alphabet().encode(&tokens.symbols()).ok()?;
    let log_prob = profile.model.log_likelihood_ids(&ids).ok()?;
    if log_prob == f64::NEG_INFINITY {
        return None;
    }
    let path = profile.model.viterbi_ids(&ids).ok()?.path;
    Some((tokens, path, log_prob))
}

/// `req.count` attacks, deterministic in `req.rng_seed`.
pub fn generate(
    profile: &AttackVectorProfile,
    req: &GenerationRequest,
) -> Result<Vec<MutatedAttack>, GeneratorError> {
    req.validate()?;
    if profile.model.num_states() == 0 {
        return Err(GeneratorError::EmptyModel);
    }
    let seed_path = match req.mode {
        GenerationMode::PathResample => Some(derive_path(profile, &req.seed_attack)?.0),
        GenerationMode::FreeWalk => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.rng_seed);
    let mut sampler = Sampler::new(profile);
    let mut out = Vec::with_capacity(req.count);
    for _ in 0..req.count {
        let mut found = None;
        for _ in 0..req.max_attempts {
            let walked;
            let path = match &seed_path {
                Some(p) => p.as_slice(),
                None => {
                    walked = sampler.walk(&mut rng);
                    walked.as_slice()
                }
            };
            let (text, body_span) = sampler.draft(path, &req.body, &mut rng)?;
            if let Some((tokens, state_path, log_prob)) = validate_draft(profile, &text, &req.body)
            {
                found = Some(MutatedAttack {
                    text: req.obfuscation.apply(&text),
                    canonical: text,
                    tokens,
                    state_path,
                    log_prob,
                    body_span,
                    obfuscation: req.obfuscation,
                });
                break;
            }
        }
        out.push(found.ok_or(GeneratorError::NoValidCandidate {
            attempts: req.max_attempts,
        })?);
    }
    Ok(out)
}

/// One copy of `a` per mode, each encoding its canonical text.
pub fn obfuscate_variants(a: &MutatedAttack, modes: &[Obfuscation]) -> Vec<MutatedAttack> {
    modes
        .iter()
        .map(|&mode| MutatedAttack {
            text: mode.apply(&a.canonical),
            obfuscation: mode,
            ..a.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renderer_mirrors_lexer() {
        let src = "<iframe/src=http://xssed.com>";
        let seq = tokenize(src);
        let mut r = Renderer::default();
        for t in &seq.tokens {
            r.push(t.symbol.kind(), &t.raw);
        }
        assert_eq!(r.finish().0, src);

        let src = "\"><img src=\"x\" onerror=alert(1)>text<!--c--></b>";
        let seq = tokenize(src);
        let mut r = Renderer::default();
        for t in &seq.tokens {
            r.push(t.symbol.kind(), &t.raw);
        }
        assert_eq!(r.finish().0, src);
    }

    #[test]
    fn option_parsing() {
        assert_eq!(
            "path".parse::<GenerationMode>().unwrap(),
            GenerationMode::PathResample
        );
        assert_eq!(
            "walk".parse::<GenerationMode>().unwrap(),
            GenerationMode::FreeWalk
        );
        assert_eq!(
            "entity".parse::<Obfuscation>().unwrap(),
            Obfuscation::Entity
        );
        assert!("base64".parse::<Obfuscation>().is_err());
    }

    #[test]
    fn obfuscation_layers() {
        assert_eq!(Obfuscation::Percent.apply("<script>"), "%3Cscript%3E");
        assert_eq!(Obfuscation::Entity.apply("<script>"), "&#60;script&#62;");
        assert_eq!(Obfuscation::None.apply("<b>"), "<b>");
    }

    #[test]
    fn request_validation() {
        let mut req = GenerationRequest::new("x");
        req.count = 0;
        assert!(req.validate().is_err());
        req.count = 1;
        req.body.clear();
        assert!(req.validate().is_err());
    }
}
