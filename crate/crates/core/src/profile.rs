//! Attack vector profiles on disk.
//!
//! A profile is a single JSON document with the sections `meta`, `states`,
//! `init`, `trans`, `emit`, `alphabet`, `corpus` and `config`. Object keys
//! are sorted and every probability is written with 17 significant digits,
//! so equal profiles produce identical bytes and every float survives a
//! save/load cycle bit for bit. See `FORMAT.md` for the grammar.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Map, Number, Value};
use thiserror::Error;

use crate::hmm::{Alphabet, EmittingState, Hmm, Row, StateId, SymbolId};
use crate::learner::{LearnerConfig, LikelihoodMode};
use crate::tokenizer::{format_record, parse_record, RawCorpus, TokenSymbol};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

impl ProfileError {
    fn io(path: &Path, source: io::Error) -> Self {
        ProfileError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, ProfileError> {
    Err(ProfileError::Format(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub sequence_count: u64,
    pub ingest_unix_seconds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackVectorProfile {
    pub model: Hmm,
    pub corpus: RawCorpus,
    pub config: LearnerConfig,
    pub provenance: Provenance,
}

impl AttackVectorProfile {
    pub fn alphabet(&self) -> &Alphabet {
        self.model.alphabet()
    }

    /// Emission support within the alphabet, every alphabet symbol in the
    /// corpus, stochastic rows.
    pub fn validate(&self) -> Result<(), ProfileError> {
        self.model
            .validate()
            .map_err(|e| ProfileError::Format(e.to_string()))?;
        for sym in self.alphabet().iter() {
            if !self.corpus.contains(sym) {
                return format_err(format!("alphabet symbol {sym} has no corpus entry"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let m = &self.model;
        let alphabet = m.alphabet();
        let init: Vec<Value> = row_entries(m.init(), |t| json!(t.0));
        let mut trans = Vec::new();
        let mut emit = Vec::new();
        for (id, st) in m.states() {
            for mut e in row_entries(&st.trans, |t| json!(t.0)) {
                e["from"] = json!(id.0);
                trans.push(e);
            }
            for mut e in row_entries(&st.emit, |s| json!(alphabet.symbol(s).to_string())) {
                e["from"] = json!(id.0);
                emit.push(e);
            }
        }
        json!({
            "meta": {
                "format_version": FORMAT_VERSION,
                "sequence_count": self.provenance.sequence_count,
                "ingest_unix_seconds": self.provenance.ingest_unix_seconds,
            },
            "states": {
                "start": StateId::START.0,
                "end": StateId::END.0,
                "emitting": m.states().keys().map(|s| s.0).collect::<Vec<_>>(),
                "next_id": m.next_state_id().0,
            },
            "init": init,
            "trans": trans,
            "emit": emit,
            "alphabet": alphabet.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "corpus": corpus_to_json(&self.corpus),
            "config": config_to_json(&self.config),
        })
    }

    pub fn to_json_string(&self) -> String {
        to_text(&self.to_json())
    }

    pub fn from_json_str(text: &str) -> Result<Self, ProfileError> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| ProfileError::Format(format!("line {}: {e}", e.line())))?;
        Self::from_json(&doc)
    }

    pub fn from_json(doc: &Value) -> Result<Self, ProfileError> {
        let meta = section(doc, "meta")?;
        let version = get_u64(meta, "format_version", "meta")?;
        if version != FORMAT_VERSION {
            return format_err(format!(
                "unsupported format_version {version}, expected {FORMAT_VERSION}"
            ));
        }
        let provenance = Provenance {
            sequence_count: get_u64(meta, "sequence_count", "meta")?,
            ingest_unix_seconds: get_u64(meta, "ingest_unix_seconds", "meta")?,
        };
        let config = config_from_json(section(doc, "config")?)?;

        let states = section(doc, "states")?;
        if get_u64(states, "start", "states")? != StateId::START.0 as u64
            || get_u64(states, "end", "states")? != StateId::END.0 as u64
        {
            return format_err("states: start must be 0 and end must be 1");
        }
        let mut rows: BTreeMap<StateId, EmittingState> = BTreeMap::new();
        for (i, v) in array(states, "emitting", "states")?.iter().enumerate() {
            let id = state_id(v, &format!("states.emitting[{i}]"))?;
            if !id.is_emitting() || rows.insert(id, EmittingState::default()).is_some() {
                return format_err(format!(
                    "states.emitting[{i}]: invalid or duplicate state {id}"
                ));
            }
        }

        let mut alphabet = Alphabet::default();
        for (i, v) in array(doc, "alphabet", "profile")?.iter().enumerate() {
            let sym = symbol(v, &format!("alphabet[{i}]"))?;
            if alphabet.get(&sym).is_some() {
                return format_err(format!("alphabet[{i}]: duplicate symbol {sym}"));
            }
            alphabet.insert(sym);
        }

        let mut init = (BTreeMap::new(), BTreeMap::new());
        for (i, e) in array(doc, "init", "profile")?.iter().enumerate() {
            let at = format!("init[{i}]");
            let to = state_id(field(e, "to", &at)?, &at)?;
            if !rows.contains_key(&to) {
                return format_err(format!("{at}: unknown state {to}"));
            }
            insert_entry(&mut init, to, e, &at)?;
        }

        let mut trans: BTreeMap<StateId, RowParts<StateId>> = BTreeMap::new();
        for (i, e) in array(doc, "trans", "profile")?.iter().enumerate() {
            let at = format!("trans[{i}]");
            let from = known_state(e, &rows, &at)?;
            let to = state_id(field(e, "to", &at)?, &at)?;
            if to != StateId::END && !rows.contains_key(&to) {
                return format_err(format!("{at}: unknown target state {to}"));
            }
            insert_entry(trans.entry(from).or_default(), to, e, &at)?;
        }

        let mut emit: BTreeMap<StateId, RowParts<SymbolId>> = BTreeMap::new();
        for (i, e) in array(doc, "emit", "profile")?.iter().enumerate() {
            let at = format!("emit[{i}]");
            let from = known_state(e, &rows, &at)?;
            let sym = symbol(field(e, "to", &at)?, &at)?;
            let Some(id) = alphabet.get(&sym) else {
                return format_err(format!("{at}: symbol {sym} is not in the alphabet"));
            };
            insert_entry(emit.entry(from).or_default(), id, e, &at)?;
        }

        for (id, st) in rows.iter_mut() {
            if let Some((c, p)) = trans.remove(id) {
                st.trans = Row::from_parts(c, p);
            }
            if let Some((c, p)) = emit.remove(id) {
                st.emit = Row::from_parts(c, p);
            }
        }
        let corpus = corpus_from_json(section(doc, "corpus")?)?;
        let mut model = Hmm::from_rows(
            alphabet,
            config.smoothing(),
            Row::from_parts(init.0, init.1),
            rows,
        )
        .map_err(|e| ProfileError::Format(e.to_string()))?;
        if let Some(next) = states.get("next_id") {
            let next = state_id(next, "states.next_id")?;
            if model
                .states()
                .keys()
                .next_back()
                .is_some_and(|last| *last >= next)
            {
                return format_err("states.next_id must exceed every emitting state id");
            }
            model.set_next_state_id(next);
        }
        let profile = AttackVectorProfile {
            model,
            corpus,
            config,
            provenance,
        };
        profile.validate()?;
        Ok(profile)
    }
}

pub fn save(p: &AttackVectorProfile, path: &Path) -> Result<(), ProfileError> {
    write_atomic(path, p.to_json_string().as_bytes())
}

pub fn load(path: &Path) -> Result<AttackVectorProfile, ProfileError> {
    let text = fs::read_to_string(path).map_err(|e| ProfileError::io(path, e))?;
    AttackVectorProfile::from_json_str(&text)
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProfileError> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(ProfileError::io(path, e));
    }
    Ok(())
}

pub(crate) fn to_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

/// Float with 17 significant digits; integral values print as integers.
pub(crate) fn float_value(x: f64) -> Value {
    let text = if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.16e}")
    };
    Value::Number(Number::from_str(&text).expect("finite float renders as a JSON number"))
}

fn row_entries<K: Ord + Copy>(row: &Row<K>, key: impl Fn(K) -> Value) -> Vec<Value> {
    row.probs()
        .iter()
        .map(|(&k, &p)| {
            json!({
                "to": key(k),
                "prob": float_value(p),
                "count": float_value(row.count(&k)),
            })
        })
        .collect()
}

/// Probabilities and counts of one row as read from a file.
type RowParts<K> = (BTreeMap<K, f64>, BTreeMap<K, f64>);

fn insert_entry<K: Ord + Copy>(
    row: &mut RowParts<K>,
    key: K,
    e: &Value,
    at: &str,
) -> Result<(), ProfileError> {
    let prob = get_f64(e, "prob", at)?;
    let count = get_f64(e, "count", at)?;
    if !(0.0..=1.0).contains(&prob) || count <= 0.0 {
        return format_err(format!("{at}: probability or count out of range"));
    }
    if row.1.insert(key, prob).is_some() {
        return format_err(format!("{at}: duplicate entry"));
    }
    row.0.insert(key, count);
    Ok(())
}

fn section<'a>(doc: &'a Value, key: &str) -> Result<&'a Value, ProfileError> {
    match doc.get(key) {
        Some(v) if v.is_object() => Ok(v),
        _ => format_err(format!("missing section `{key}`")),
    }
}

fn field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Value, ProfileError> {
    v.get(key)
        .ok_or_else(|| ProfileError::Format(format!("{at}: missing field `{key}`")))
}

fn array<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Vec<Value>, ProfileError> {
    field(v, key, at)?
        .as_array()
        .ok_or_else(|| ProfileError::Format(format!("{at}: `{key}` must be an array")))
}

fn get_u64(v: &Value, key: &str, at: &str) -> Result<u64, ProfileError> {
    field(v, key, at)?.as_u64().ok_or_else(|| {
        ProfileError::Format(format!("{at}: `{key}` must be a non-negative integer"))
    })
}

fn get_f64(v: &Value, key: &str, at: &str) -> Result<f64, ProfileError> {
    field(v, key, at)?
        .as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ProfileError::Format(format!("{at}: `{key}` must be a number")))
}

fn state_id(v: &Value, at: &str) -> Result<StateId, ProfileError> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .map(StateId)
        .ok_or_else(|| ProfileError::Format(format!("{at}: state id must be an integer")))
}

fn known_state(
    e: &Value,
    rows: &BTreeMap<StateId, EmittingState>,
    at: &str,
) -> Result<StateId, ProfileError> {
    let id = state_id(field(e, "from", at)?, at)?;
    if !rows.contains_key(&id) {
        return format_err(format!("{at}: unknown state {id}"));
    }
    Ok(id)
}

fn symbol(v: &Value, at: &str) -> Result<TokenSymbol, ProfileError> {
    let s = v
        .as_str()
        .ok_or_else(|| ProfileError::Format(format!("{at}: symbol must be a string")))?;
    s.parse()
        .map_err(|e| ProfileError::Format(format!("{at}: {e}")))
}

fn config_to_json(c: &LearnerConfig) -> Value {
    json!({
        "dirichlet_alpha": float_value(c.dirichlet_alpha),
        "dirichlet_beta": float_value(c.dirichlet_beta),
        "structure_lambda": float_value(c.structure_lambda),
        "likelihood_mode": c.likelihood_mode.to_string(),
        "max_merges": c.max_merges,
        "interleave": c.interleave,
    })
}

fn config_from_json(v: &Value) -> Result<LearnerConfig, ProfileError> {
    let at = "config";
    let mode = field(v, "likelihood_mode", at)?
        .as_str()
        .ok_or_else(|| ProfileError::Format("config: likelihood_mode must be a string".into()))?;
    let max_merges =
        match v.get("max_merges") {
            None | Some(Value::Null) => None,
            Some(m) => Some(m.as_u64().ok_or_else(|| {
                ProfileError::Format("config: max_merges must be an integer".into())
            })? as usize),
        };
    let cfg = LearnerConfig {
        dirichlet_alpha: get_f64(v, "dirichlet_alpha", at)?,
        dirichlet_beta: get_f64(v, "dirichlet_beta", at)?,
        structure_lambda: get_f64(v, "structure_lambda", at)?,
        likelihood_mode: LikelihoodMode::from_str(mode)
            .map_err(|e| ProfileError::Format(format!("config: {e}")))?,
        max_merges,
        interleave: v
            .get("interleave")
            .and_then(Value::as_bool)
            .unwrap_or(false),
    };
    cfg.validate()
        .map_err(|e| ProfileError::Format(e.to_string()))?;
    Ok(cfg)
}

pub(crate) fn corpus_to_json(corpus: &RawCorpus) -> Value {
    let mut out = Map::new();
    for (sym, raws) in corpus.iter() {
        let entries: Map<String, Value> =
            raws.iter().map(|(r, &c)| (r.clone(), json!(c))).collect();
        out.insert(sym.to_string(), Value::Object(entries));
    }
    Value::Object(out)
}

pub(crate) fn corpus_from_json(v: &Value) -> Result<RawCorpus, ProfileError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ProfileError::Format("corpus must be an object".into()))?;
    let mut corpus = RawCorpus::new();
    for (key, raws) in obj {
        let at = format!("corpus.{key}");
        let sym = symbol(&Value::String(key.clone()), &at)?;
        let raws = raws
            .as_object()
            .ok_or_else(|| ProfileError::Format(format!("{at}: must be an object")))?;
        for (raw, c) in raws {
            let c = c.as_u64().filter(|&c| c >= 1).ok_or_else(|| {
                ProfileError::Format(format!("{at}: count of `{raw}` must be a positive integer"))
            })?;
            if raw.is_empty() {
                return format_err(format!("{at}: empty raw substring"));
            }
            corpus.add(sym.clone(), raw, c);
        }
    }
    Ok(corpus)
}

/// Standalone raw corpus file written by `ingest`, stamped with the
/// ingestion time.
pub fn save_corpus(
    corpus: &RawCorpus,
    ingest_unix_seconds: u64,
    path: &Path,
) -> Result<(), ProfileError> {
    let doc = json!({
        "meta": {
            "format_version": FORMAT_VERSION,
            "ingest_unix_seconds": ingest_unix_seconds,
        },
        "corpus": corpus_to_json(corpus),
    });
    write_atomic(path, to_text(&doc).as_bytes())
}

/// Corpus and its ingestion time.
pub fn load_corpus(path: &Path) -> Result<(RawCorpus, u64), ProfileError> {
    let text = fs::read_to_string(path).map_err(|e| ProfileError::io(path, e))?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| ProfileError::Format(format!("line {}: {e}", e.line())))?;
    let meta = section(&doc, "meta")?;
    let version = get_u64(meta, "format_version", "meta")?;
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported format_version {version}"));
    }
    let stamp = get_u64(meta, "ingest_unix_seconds", "meta")?;
    Ok((corpus_from_json(section(&doc, "corpus")?)?, stamp))
}

/// One sequence per line as tab-separated `kind:name` symbols.
pub fn save_sequences(seqs: &[Vec<TokenSymbol>], path: &Path) -> Result<(), ProfileError> {
    let mut text = String::new();
    for s in seqs {
        text.push_str(&format_record(s));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_sequences(path: &Path) -> Result<Vec<Vec<TokenSymbol>>, ProfileError> {
    let text = fs::read_to_string(path).map_err(|e| ProfileError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l).map_err(|e| ProfileError::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner;

    fn toy() -> AttackVectorProfile {
        let xs: Vec<Vec<TokenSymbol>> = vec![
            vec![TokenSymbol::plain_text(), TokenSymbol::start_tag("script")],
            vec![
                TokenSymbol::start_tag("script"),
                TokenSymbol::end_tag("script"),
            ],
        ];
        let cfg = LearnerConfig::default();
        let model = learner::learn(&xs, &cfg).unwrap();
        let mut corpus = RawCorpus::new();
        corpus.add(TokenSymbol::plain_text(), "\">", 1);
        corpus.add(TokenSymbol::start_tag("script"), "ScRiPt", 2);
        corpus.add(TokenSymbol::end_tag("script"), "script", 1);
        AttackVectorProfile {
            model,
            corpus,
            config: cfg,
            provenance: Provenance {
                sequence_count: 2,
                ingest_unix_seconds: 1_700_000_000,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let p = toy();
        let text = p.to_json_string();
        let back = AttackVectorProfile::from_json_str(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn float_rendering() {
        assert_eq!(float_value(2.0).to_string(), "2");
        assert_eq!(float_value(0.1).to_string(), "1.0000000000000001e-1");
        let x = 1.0 / 3.0;
        assert_eq!(float_value(x).as_f64().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn rejects_future_version() {
        let mut doc = toy().to_json();
        doc["meta"]["format_version"] = json!(2);
        let err = AttackVectorProfile::from_json(&doc).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn rejects_non_stochastic_row() {
        let mut doc = toy().to_json();
        let trans = doc["trans"].as_array_mut().unwrap();
        let from = trans[0]["from"].clone();
        let p = trans[0]["prob"].as_f64().unwrap();
        trans[0]["prob"] = float_value(p - 0.2);
        let err = AttackVectorProfile::from_json(&doc)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&format!("state {}", from)), "{err}");
    }

    #[test]
    fn rejects_unknown_kind() {
        let mut doc = toy().to_json();
        doc["alphabet"][0] = json!("bogus:x");
        assert!(AttackVectorProfile::from_json(&doc).is_err());
    }
}
