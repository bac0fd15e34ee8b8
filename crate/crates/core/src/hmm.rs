//! Discrete hidden Markov model over token symbols with explicit,
//! non-emitting START and END states.
//!
//! Every row stores both its sufficient statistics (counts) and the
//! probabilities derived from them. Probabilities are smoothed over the
//! row's support: `p = (c + conc) / (total + conc * arity)`, so a
//! transition or emission that was never counted stays impossible.
//!
//! Inference runs in log space; `f64::NEG_INFINITY` marks impossibility.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenSymbol;

/// Tolerance for row sums.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub u32);

impl StateId {
    pub const START: StateId = StateId(0);
    pub const END: StateId = StateId(1);
    pub const FIRST_EMITTING: u32 = 2;

    pub fn is_emitting(self) -> bool {
        self.0 >= Self::FIRST_EMITTING
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StateId::START => f.write_str("START"),
            StateId::END => f.write_str("END"),
            StateId(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolId(pub u32);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error("symbol `{0}` is not in the model alphabet")]
    UnknownSymbol(TokenSymbol),
    #[error("no state path emits the sequence")]
    NoPath,
    #[error("sequence is empty")]
    EmptySequence,
    #[error("cannot merge states {0} and {1}")]
    InvalidStatePair(StateId, StateId),
    #[error("state {0} does not exist")]
    UnknownState(StateId),
    #[error("{row} sums to {sum}, expected 1")]
    NonStochasticRow { row: String, sum: f64 },
    #[error("invalid model structure: {0}")]
    InvalidStructure(String),
}

/// Ordered symbol set; a symbol's id is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<TokenSymbol>,
    index: HashMap<TokenSymbol, SymbolId>,
}

impl Alphabet {
    /// Alphabet over the sorted, deduplicated symbols.
    pub fn from_symbols<I: IntoIterator<Item = TokenSymbol>>(symbols: I) -> Self {
        let sorted: BTreeSet<TokenSymbol> = symbols.into_iter().collect();
        let mut alphabet = Alphabet::default();
        for s in sorted {
            alphabet.insert(s);
        }
        alphabet
    }

    /// Append `symbol` if absent; returns its id.
    pub fn insert(&mut self, symbol: TokenSymbol) -> SymbolId {
        if let Some(&id) = self.index.get(&symbol) {
            return id;
        }
        let id = SymbolId(self.symbols.len() as u32);
        self.index.insert(symbol.clone(), id);
        self.symbols.push(symbol);
        id
    }

    pub fn get(&self, symbol: &TokenSymbol) -> Option<SymbolId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: SymbolId) -> &TokenSymbol {
        &self.symbols[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenSymbol> {
        self.symbols.iter()
    }

    pub fn encode(&self, symbols: &[TokenSymbol]) -> Result<Vec<SymbolId>, HmmError> {
        symbols
            .iter()
            .map(|s| {
                self.get(s)
                    .ok_or_else(|| HmmError::UnknownSymbol(s.clone()))
            })
            .collect()
    }
}

/// Sparse distribution row with its counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Row<K: Ord> {
    counts: BTreeMap<K, f64>,
    probs: BTreeMap<K, f64>,
}

impl<K: Ord> Default for Row<K> {
    fn default() -> Self {
        Row {
            counts: BTreeMap::new(),
            probs: BTreeMap::new(),
        }
    }
}

impl<K: Ord + Copy> Row<K> {
    pub fn from_parts(counts: BTreeMap<K, f64>, probs: BTreeMap<K, f64>) -> Self {
        Row { counts, probs }
    }

    /// Row whose counts equal the given probabilities.
    pub fn from_probs(probs: BTreeMap<K, f64>) -> Self {
        Row {
            counts: probs.clone(),
            probs,
        }
    }

    pub fn counts(&self) -> &BTreeMap<K, f64> {
        &self.counts
    }

    pub fn probs(&self) -> &BTreeMap<K, f64> {
        &self.probs
    }

    pub fn prob(&self, k: &K) -> f64 {
        self.probs.get(k).copied().unwrap_or(0.0)
    }

    pub fn count(&self, k: &K) -> f64 {
        self.counts.get(k).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// Number of keys with positive count.
    pub fn arity(&self) -> usize {
        self.counts.values().filter(|&&c| c > 0.0).count()
    }

    pub fn prob_sum(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn add(&mut self, k: K, c: f64) {
        *self.counts.entry(k).or_insert(0.0) += c;
    }

    fn take(&mut self, k: &K) -> f64 {
        self.counts.remove(k).unwrap_or(0.0)
    }

    /// Recompute probabilities from counts with concentration `conc`.
    pub fn normalize(&mut self, conc: f64) {
        self.counts.retain(|_, c| *c > 0.0);
        let arity = self.counts.len() as f64;
        let denom = self.total() + conc * arity;
        self.probs = self
            .counts
            .iter()
            .map(|(&k, &c)| (k, (c + conc) / denom))
            .collect();
    }
}

/// Dirichlet concentrations for transition (alpha) and emission (beta) rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmittingState {
    /// Outgoing transitions; keys are emitting states or END.
    pub trans: Row<StateId>,
    pub emit: Row<SymbolId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub path: Vec<StateId>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hmm {
    alphabet: Alphabet,
    smoothing: Smoothing,
    init: Row<StateId>,
    states: BTreeMap<StateId, EmittingState>,
    next_id: u32,
}

impl Hmm {
    pub fn new(alphabet: Alphabet, smoothing: Smoothing) -> Self {
        Hmm {
            alphabet,
            smoothing,
            init: Row::default(),
            states: BTreeMap::new(),
            next_id: StateId::FIRST_EMITTING,
        }
    }

    /// Assemble a model from explicit rows and check it.
    pub fn from_rows(
        alphabet: Alphabet,
        smoothing: Smoothing,
        init: Row<StateId>,
        states: BTreeMap<StateId, EmittingState>,
    ) -> Result<Self, HmmError> {
        let next_id = states
            .keys()
            .next_back()
            .map_or(StateId::FIRST_EMITTING, |s| s.0 + 1);
        let hmm = Hmm {
            alphabet,
            smoothing,
            init,
            states,
            next_id,
        };
        hmm.validate()?;
        Ok(hmm)
    }

    /// Id the next added state will get.
    pub fn next_state_id(&self) -> StateId {
        StateId(self.next_id)
    }

    /// Reserve ids below `next`; ignored if it would reuse a live id.
    pub fn set_next_state_id(&mut self, next: StateId) {
        let floor = self
            .states
            .keys()
            .next_back()
            .map_or(StateId::FIRST_EMITTING, |s| s.0 + 1);
        self.next_id = next.0.max(floor);
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn init(&self) -> &Row<StateId> {
        &self.init
    }

    pub fn states(&self) -> &BTreeMap<StateId, EmittingState> {
        &self.states
    }

    pub fn state(&self, id: StateId) -> Option<&EmittingState> {
        self.states.get(&id)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Nonzero transitions, counting START and END edges.
    pub fn num_transitions(&self) -> usize {
        self.init.arity() + self.states.values().map(|s| s.trans.arity()).sum::<usize>()
    }

    pub fn num_emissions(&self) -> usize {
        self.states.values().map(|s| s.emit.arity()).sum()
    }

    /// Id of `symbol`, adding it to the alphabet if needed.
    pub fn intern(&mut self, symbol: TokenSymbol) -> SymbolId {
        self.alphabet.insert(symbol)
    }

    /// Add an isolated state with no counts.
    pub fn add_state(&mut self) -> StateId {
        let id = StateId(self.next_id);
        self.next_id += 1;
        self.states.insert(id, EmittingState::default());
        id
    }

    /// Append a left-to-right chain emitting `symbols`, one count per edge
    /// and emission.
    pub fn add_chain(&mut self, symbols: &[SymbolId]) -> Vec<StateId> {
        let ids: Vec<StateId> = symbols.iter().map(|_| self.add_state()).collect();
        for (i, (&id, &sym)) in ids.iter().zip(symbols).enumerate() {
            let next = ids.get(i + 1).copied().unwrap_or(StateId::END);
            let st = self.states.get_mut(&id).expect("fresh state");
            st.emit.add(sym, 1.0);
            st.trans.add(next, 1.0);
            st.emit.normalize(self.smoothing.beta);
            st.trans.normalize(self.smoothing.alpha);
        }
        if let Some(&first) = ids.first() {
            self.init.add(first, 1.0);
            self.init.normalize(self.smoothing.alpha);
        }
        ids
    }

    /// Rows (other than those of `target` itself) with a transition into `target`.
    pub fn predecessors(&self, target: StateId) -> Vec<StateId> {
        let mut preds = Vec::new();
        if self.init.count(&target) > 0.0 {
            preds.push(StateId::START);
        }
        for (&id, st) in &self.states {
            if st.trans.count(&target) > 0.0 {
                preds.push(id);
            }
        }
        preds
    }

    /// Merge `a` and `b` into the lower of the two ids; counts add up and
    /// the affected rows are re-normalized. Returns the surviving id.
    pub fn merge_states(&mut self, a: StateId, b: StateId) -> Result<StateId, HmmError> {
        self.check_pair(a, b)?;
        let removed = a.max(b);
        let preds = self.predecessors(removed);
        Ok(self.merge_with_preds(a, b, &preds))
    }

    pub(crate) fn check_pair(&self, a: StateId, b: StateId) -> Result<(), HmmError> {
        if a == b || !a.is_emitting() || !b.is_emitting() {
            return Err(HmmError::InvalidStatePair(a, b));
        }
        for id in [a, b] {
            if !self.states.contains_key(&id) {
                return Err(HmmError::UnknownState(id));
            }
        }
        Ok(())
    }

    /// Merge with a precomputed predecessor list of the removed state.
    /// Returns the surviving id.
    pub(crate) fn merge_with_preds(
        &mut self,
        a: StateId,
        b: StateId,
        preds_of_removed: &[StateId],
    ) -> StateId {
        let (keep, removed) = (a.min(b), a.max(b));
        let gone = self.states.remove(&removed).expect("checked pair");
        let Smoothing { alpha, beta } = self.smoothing;
        {
            let kept = self.states.get_mut(&keep).expect("checked pair");
            for (&s, &c) in gone.emit.counts() {
                kept.emit.add(s, c);
            }
            for (&t, &c) in gone.trans.counts() {
                kept.trans.add(t, c);
            }
            let folded = kept.trans.take(&removed);
            if folded > 0.0 {
                kept.trans.add(keep, folded);
            }
            kept.emit.normalize(beta);
            kept.trans.normalize(alpha);
        }
        for &p in preds_of_removed {
            if p == removed || p == keep {
                continue;
            }
            let row = if p == StateId::START {
                &mut self.init
            } else {
                match self.states.get_mut(&p) {
                    Some(st) => &mut st.trans,
                    None => continue,
                }
            };
            let c = row.take(&removed);
            if c > 0.0 {
                row.add(keep, c);
            }
            row.normalize(alpha);
        }
        keep
    }

    /// Recompute every probability from counts.
    pub fn normalize(&mut self) {
        let Smoothing { alpha, beta } = self.smoothing;
        self.init.normalize(alpha);
        for st in self.states.values_mut() {
            st.trans.normalize(alpha);
            st.emit.normalize(beta);
        }
    }

    /// Check stochasticity and START/END structure.
    pub fn validate(&self) -> Result<(), HmmError> {
        let check_sum = |row: String, sum: f64| {
            if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                Err(HmmError::NonStochasticRow { row, sum })
            } else {
                Ok(())
            }
        };
        if !self.states.is_empty() || !self.init.probs().is_empty() {
            check_sum("init row".into(), self.init.prob_sum())?;
        }
        for (&t, &p) in self.init.probs() {
            if !self.states.contains_key(&t) || p < 0.0 {
                return Err(HmmError::InvalidStructure(format!(
                    "init row points at {t}, which is not an emitting state"
                )));
            }
        }
        for (&id, st) in &self.states {
            if !id.is_emitting() {
                return Err(HmmError::InvalidStructure(format!("{id} cannot emit")));
            }
            check_sum(format!("transition row of state {id}"), st.trans.prob_sum())?;
            check_sum(format!("emission row of state {id}"), st.emit.prob_sum())?;
            if !st.emit.counts().values().any(|&c| c > 0.0) {
                return Err(HmmError::InvalidStructure(format!(
                    "state {id} has no positive emission count"
                )));
            }
            for (&t, &p) in st.trans.probs() {
                let ok = t == StateId::END || self.states.contains_key(&t);
                if !ok || p < 0.0 {
                    return Err(HmmError::InvalidStructure(format!(
                        "state {id} has a transition into {t}"
                    )));
                }
            }
            for &s in st.emit.probs().keys() {
                if s.0 as usize >= self.alphabet.len() {
                    return Err(HmmError::InvalidStructure(format!(
                        "state {id} emits symbol #{} outside the alphabet",
                        s.0
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn compile(&self) -> Compiled {
        Compiled::new(self)
    }

    /// Log-probability of `symbols`, summed over all state paths.
    pub fn sequence_log_likelihood(&self, symbols: &[TokenSymbol]) -> Result<f64, HmmError> {
        let ids = self.alphabet.encode(symbols)?;
        self.log_likelihood_ids(&ids)
    }

    pub fn log_likelihood_ids(&self, symbols: &[SymbolId]) -> Result<f64, HmmError> {
        if symbols.is_empty() {
            return Err(HmmError::EmptySequence);
        }
        Ok(self.compile().log_likelihood(symbols))
    }

    /// Most likely state path. Among equally likely paths the
    /// lexicographically smallest (by state id) is returned.
    pub fn viterbi(&self, symbols: &[TokenSymbol]) -> Result<ViterbiPath, HmmError> {
        let ids = self.alphabet.encode(symbols)?;
        self.viterbi_ids(&ids)
    }

    pub fn viterbi_ids(&self, symbols: &[SymbolId]) -> Result<ViterbiPath, HmmError> {
        if symbols.is_empty() {
            return Err(HmmError::EmptySequence);
        }
        self.compile().viterbi(symbols).ok_or(HmmError::NoPath)
    }
}

/// Dense, log-space view of a model used by the inference routines.
pub(crate) struct Compiled {
    ids: Vec<StateId>,
    init: Vec<(usize, f64)>,
    out: Vec<Vec<(usize, f64)>>,
    end: Vec<f64>,
    emit: Vec<HashMap<SymbolId, f64>>,
    by_symbol: HashMap<SymbolId, Vec<usize>>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl Compiled {
    fn new(hmm: &Hmm) -> Self {
        let ids: Vec<StateId> = hmm.states.keys().copied().collect();
        let dense: HashMap<StateId, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let n = ids.len();
        let init = hmm
            .init
            .probs()
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .filter_map(|(s, &p)| dense.get(s).map(|&i| (i, p.ln())))
            .collect();
        let mut out = vec![Vec::new(); n];
        let mut end = vec![f64::NEG_INFINITY; n];
        let mut emit = vec![HashMap::new(); n];
        let mut by_symbol: HashMap<SymbolId, Vec<usize>> = HashMap::new();
        for (i, st) in hmm.states.values().enumerate() {
            for (&t, &p) in st.trans.probs() {
                if p <= 0.0 {
                    continue;
                }
                if t == StateId::END {
                    end[i] = p.ln();
                } else if let Some(&j) = dense.get(&t) {
                    out[i].push((j, p.ln()));
                }
            }
            for (&s, &p) in st.emit.probs() {
                if p > 0.0 {
                    emit[i].insert(s, p.ln());
                    by_symbol.entry(s).or_default().push(i);
                }
            }
        }
        Compiled {
            ids,
            init,
            out,
            end,
            emit,
            by_symbol,
        }
    }

    /// Backward tables: `tables[t][s]` is the best (or summed) log-probability
    /// of emitting `x[t..]` from state `s` at time `t` and then reaching END.
    fn backward(&self, x: &[SymbolId], sum: bool) -> Vec<Vec<f64>> {
        let n = self.ids.len();
        let len = x.len();
        let mut tables = vec![vec![f64::NEG_INFINITY; n]; len];
        let empty = Vec::new();
        for &s in self.by_symbol.get(&x[len - 1]).unwrap_or(&empty) {
            tables[len - 1][s] = self.emit[s][&x[len - 1]] + self.end[s];
        }
        for t in (0..len - 1).rev() {
            let (head, tail) = tables.split_at_mut(t + 1);
            let next = &tail[0];
            let cur = &mut head[t];
            for &s in self.by_symbol.get(&x[t]).unwrap_or(&empty) {
                let mut acc = f64::NEG_INFINITY;
                for &(s2, lp) in &self.out[s] {
                    let v = lp + next[s2];
                    acc = if sum { log_add(acc, v) } else { acc.max(v) };
                }
                cur[s] = self.emit[s][&x[t]] + acc;
            }
        }
        tables
    }

    pub(crate) fn log_likelihood(&self, x: &[SymbolId]) -> f64 {
        let tables = self.backward(x, true);
        self.init.iter().fold(f64::NEG_INFINITY, |acc, &(s, lp)| {
            log_add(acc, lp + tables[0][s])
        })
    }

    pub(crate) fn viterbi_log_prob(&self, x: &[SymbolId]) -> f64 {
        let tables = self.backward(x, false);
        self.init
            .iter()
            .map(|&(s, lp)| lp + tables[0][s])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn viterbi(&self, x: &[SymbolId]) -> Option<ViterbiPath> {
        let tables = self.backward(x, false);
        let (mut cur, best) =
            first_near_max(self.init.iter().map(|&(s, lp)| (s, lp + tables[0][s])))?;
        let mut path = Vec::with_capacity(x.len());
        path.push(self.ids[cur]);
        for next in tables.iter().skip(1) {
            let (choice, _) =
                first_near_max(self.out[cur].iter().map(|&(s2, lp)| (s2, lp + next[s2])))?;
            cur = choice;
            path.push(self.ids[cur]);
        }
        Some(ViterbiPath {
            path,
            log_prob: best,
        })
    }
}

/// First candidate (in ascending state order) whose score is within rounding
/// noise of the maximum, so exact ties resolve to the smallest state id even
/// when summation order perturbs the last bits.
fn first_near_max(candidates: impl Iterator<Item = (usize, f64)> + Clone) -> Option<(usize, f64)> {
    let best = candidates
        .clone()
        .map(|(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return None;
    }
    let slack = 1e-12 * best.abs().max(1.0);
    candidates
        .filter(|&(_, v)| v >= best - slack)
        .min_by_key(|&(s, _)| s)
        .map(|(s, _)| (s, best))
}
