//! Bayesian state merging over incorporated token sequences.
//!
//! Every training sequence is first added as its own left-to-right chain.
//! The learner then repeatedly picks the state pair whose merge most
//! improves `log P(M) + log P(X|M)` and applies it, until no merge improves
//! the posterior.
//!
//! `log P(M)` is a symmetric Dirichlet density over every row plus a
//! description-length penalty of `lambda` per state, nonzero transition and
//! nonzero emission.
//!
//! Candidates are ranked by the count-based (Viterbi-count) posterior,
//! which decomposes over rows and can be updated incrementally after each
//! merge. A candidate is applied only if the posterior computed with the
//! configured likelihood mode strictly increases.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::Alphabet;
use crate::hmm::{Hmm, HmmError, Row, Smoothing, StateId, SymbolId};
use crate::tokenizer::TokenSymbol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodMode {
    /// Sum of per-sequence Viterbi log-probabilities.
    ViterbiApprox,
    /// Sum of per-sequence forward log-likelihoods.
    ForwardExact,
}

impl fmt::Display for LikelihoodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LikelihoodMode::ViterbiApprox => "viterbi",
            LikelihoodMode::ForwardExact => "forward",
        })
    }
}

impl FromStr for LikelihoodMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "viterbi" | "viterbi-approx" => Ok(LikelihoodMode::ViterbiApprox),
            "forward" | "forward-exact" => Ok(LikelihoodMode::ForwardExact),
            other => Err(format!("unknown likelihood mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub dirichlet_alpha: f64,
    pub dirichlet_beta: f64,
    pub structure_lambda: f64,
    pub likelihood_mode: LikelihoodMode,
    pub max_merges: Option<usize>,
    /// Merge to convergence after each incorporated sequence instead of
    /// once after all of them.
    #[serde(default)]
    pub interleave: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            dirichlet_alpha: 0.5,
            dirichlet_beta: 0.5,
            structure_lambda: 1.0,
            likelihood_mode: LikelihoodMode::ViterbiApprox,
            max_merges: None,
            interleave: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dirichlet_alpha) || !positive(self.dirichlet_beta) {
            return Err(LearnerError::InvalidConfig(
                "dirichlet concentrations must be positive".into(),
            ));
        }
        if !(self.structure_lambda.is_finite() && self.structure_lambda >= 0.0) {
            return Err(LearnerError::InvalidConfig(
                "structure lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn smoothing(&self) -> Smoothing {
        Smoothing {
            alpha: self.dirichlet_alpha,
            beta: self.dirichlet_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("invalid learner configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training sequence {0} is empty")]
    EmptySequence(usize),
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeCandidate {
    pub state_a: StateId,
    pub state_b: StateId,
    pub delta_log_posterior: f64,
}

/// One accepted merge, reported to observers.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStep {
    pub index: usize,
    /// Candidate with its delta under the configured likelihood mode.
    pub candidate: MergeCandidate,
    /// Delta under the count-based score used for ranking.
    pub ranking_delta: f64,
    pub log_posterior_before: f64,
    pub log_posterior_after: f64,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub model: Hmm,
    /// Posterior of the fully incorporated, unmerged chain model.
    pub chain_log_posterior: f64,
    pub chain_states: usize,
    pub final_log_posterior: f64,
    pub merges: usize,
    /// Candidates whose ranking delta was positive but whose exact delta was not.
    pub rejected: usize,
}

/// Append `x` as a fresh chain. Unknown symbols join the alphabet.
pub fn incorporate(m: &mut Hmm, x: &[TokenSymbol]) -> Vec<StateId> {
    let ids: Vec<SymbolId> = x.iter().map(|s| m.intern(s.clone())).collect();
    m.add_chain(&ids)
}

fn log_dirichlet<'a>(probs: impl Iterator<Item = &'a f64>, conc: f64) -> f64 {
    let mut k = 0usize;
    let mut log_sum = 0.0;
    for &p in probs {
        if p > 0.0 {
            k += 1;
            log_sum += p.ln();
        }
    }
    if k <= 1 {
        return 0.0;
    }
    let kf = k as f64;
    libm::lgamma(kf * conc) - kf * libm::lgamma(conc) + (conc - 1.0) * log_sum
}

/// `log P(M)`: Dirichlet densities of all rows minus the structure penalty.
pub fn log_prior(m: &Hmm, cfg: &LearnerConfig) -> f64 {
    let (alpha, beta) = (cfg.dirichlet_alpha, cfg.dirichlet_beta);
    let mut lp = log_dirichlet(m.init().probs().values(), alpha);
    for st in m.states().values() {
        lp += log_dirichlet(st.trans.probs().values(), alpha);
        lp += log_dirichlet(st.emit.probs().values(), beta);
    }
    let size = m.num_states() + m.num_transitions() + m.num_emissions();
    lp - cfg.structure_lambda * size as f64
}

/// `log P(X|M)` under `mode`.
pub fn log_likelihood<S: AsRef<[TokenSymbol]>>(
    m: &Hmm,
    xs: &[S],
    mode: LikelihoodMode,
) -> Result<f64, HmmError> {
    let encoded = xs
        .iter()
        .map(|x| {
            if x.as_ref().is_empty() {
                Err(HmmError::EmptySequence)
            } else {
                m.alphabet().encode(x.as_ref())
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(likelihood_ids(m, &encoded, mode))
}

fn likelihood_ids(m: &Hmm, xs: &[Vec<SymbolId>], mode: LikelihoodMode) -> f64 {
    let compiled = m.compile();
    xs.par_iter()
        .map(|x| match mode {
            LikelihoodMode::ViterbiApprox => compiled.viterbi_log_prob(x),
            LikelihoodMode::ForwardExact => compiled.log_likelihood(x),
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// `log P(M) + log P(X|M)`.
pub fn log_posterior<S: AsRef<[TokenSymbol]>>(
    m: &Hmm,
    xs: &[S],
    cfg: &LearnerConfig,
) -> Result<f64, HmmError> {
    if xs.is_empty() {
        return Err(HmmError::EmptySequence);
    }
    Ok(log_prior(m, cfg) + log_likelihood(m, xs, cfg.likelihood_mode)?)
}

fn exact_posterior(m: &Hmm, xs: &[Vec<SymbolId>], cfg: &LearnerConfig) -> f64 {
    log_prior(m, cfg) + likelihood_ids(m, xs, cfg.likelihood_mode)
}

/// Incorporate every sequence, then merge best-first.
pub fn learn<S: AsRef<[TokenSymbol]>>(xs: &[S], cfg: &LearnerConfig) -> Result<Hmm, LearnerError> {
    learn_with_observer(xs, cfg, |_, _| {}).map(|o| o.model)
}

/// As [`learn`], calling `observer` with each accepted merge and the model
/// it produced.
pub fn learn_with_observer<S, F>(
    xs: &[S],
    cfg: &LearnerConfig,
    mut observer: F,
) -> Result<LearnOutcome, LearnerError>
where
    S: AsRef<[TokenSymbol]>,
    F: FnMut(&MergeStep, &Hmm),
{
    cfg.validate()?;
    if xs.is_empty() {
        return Err(LearnerError::EmptyTrainingSet);
    }
    if let Some(i) = xs.iter().position(|x| x.as_ref().is_empty()) {
        return Err(LearnerError::EmptySequence(i));
    }
    let alphabet = Alphabet::from_symbols(xs.iter().flat_map(|x| x.as_ref().iter().cloned()));
    let encoded: Vec<Vec<SymbolId>> = xs
        .iter()
        .map(|x| alphabet.encode(x.as_ref()))
        .collect::<Result<_, _>>()?;
    let mut model = Hmm::new(alphabet, cfg.smoothing());
    let mut merges = 0;
    let mut rejected = 0;
    let mut step_index = 0;

    if !cfg.interleave {
        for x in &encoded {
            model.add_chain(x);
        }
        let chain_states = model.num_states();
        let mut engine = Engine::new(model, &encoded, cfg);
        let chain_log_posterior = engine.posterior;
        engine.run(cfg.max_merges, &mut step_index, &mut observer);
        return Ok(LearnOutcome {
            final_log_posterior: engine.posterior,
            merges: engine.merges,
            rejected: engine.rejected,
            model: engine.model,
            chain_log_posterior,
            chain_states,
        });
    }

    let mut chain_model = model.clone();
    for x in &encoded {
        chain_model.add_chain(x);
    }
    let chain_log_posterior = exact_posterior(&chain_model, &encoded, cfg);
    let chain_states = chain_model.num_states();
    drop(chain_model);
    for i in 0..encoded.len() {
        model.add_chain(&encoded[i]);
        let budget = cfg.max_merges.map(|m| m.saturating_sub(merges));
        let mut engine = Engine::new(model, &encoded[..=i], cfg);
        engine.run(budget, &mut step_index, &mut observer);
        merges += engine.merges;
        rejected += engine.rejected;
        model = engine.model;
    }
    let final_log_posterior = exact_posterior(&model, &encoded, cfg);
    Ok(LearnOutcome {
        model,
        chain_log_posterior,
        chain_states,
        final_log_posterior,
        merges,
        rejected,
    })
}

/// Summary of a row sufficient for its count-based score:
/// `a = sum (c + conc - 1) ln(c + conc)`, `n = sum c`, `k = support size`.
#[derive(Debug, Clone, Copy, Default)]
struct RowStat {
    a: f64,
    n: f64,
    k: usize,
}

fn h(c: f64, conc: f64) -> f64 {
    (c + conc - 1.0) * (c + conc).ln()
}

impl RowStat {
    fn of<'a>(counts: impl Iterator<Item = &'a f64>, conc: f64) -> Self {
        let mut s = RowStat::default();
        for &c in counts {
            if c > 0.0 {
                s.a += h(c, conc);
                s.n += c;
                s.k += 1;
            }
        }
        s
    }

    /// `sum c ln p + ln Dir(p; conc)` with `p = (c + conc) / (n + k conc)`.
    fn score(self, conc: f64) -> f64 {
        if self.k <= 1 {
            return 0.0;
        }
        let k = self.k as f64;
        self.a - (self.n + k * (conc - 1.0)) * (self.n + k * conc).ln() + libm::lgamma(k * conc)
            - k * libm::lgamma(conc)
    }

    /// The same row after two of its entries are folded into one.
    fn fold(self, c1: f64, c2: f64, conc: f64) -> Self {
        RowStat {
            a: self.a - h(c1, conc) - h(c2, conc) + h(c1 + c2, conc),
            n: self.n,
            k: self.k - 1,
        }
    }
}

/// Upper-triangular pair matrix with cached per-row maxima.
struct PairTable {
    n: usize,
    deltas: Vec<f64>,
    row_best: Vec<Option<(f64, usize)>>,
    dirty: Vec<bool>,
}

impl PairTable {
    fn new(n: usize) -> Self {
        PairTable {
            n,
            deltas: vec![f64::NEG_INFINITY; n * n.saturating_sub(1) / 2],
            row_best: vec![None; n],
            dirty: vec![true; n],
        }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.deltas[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.deltas[idx] = v;
        match self.row_best[i] {
            _ if self.dirty[i] => {}
            Some((best, arg)) if v > best || (v == best && j < arg) => {
                self.row_best[i] = Some((v, j));
            }
            Some((_, arg)) if arg == j => self.dirty[i] = true,
            _ => {}
        }
    }

    fn row_max(&mut self, i: usize, alive: &[bool]) -> Option<(f64, usize)> {
        if self.dirty[i] {
            let mut best: Option<(f64, usize)> = None;
            for (j, _) in alive.iter().enumerate().skip(i + 1).filter(|(_, &a)| a) {
                let v = self.get(i, j);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, j));
                }
            }
            self.row_best[i] = best;
            self.dirty[i] = false;
        }
        self.row_best[i]
    }
}

struct Engine<'x> {
    model: Hmm,
    data: &'x [Vec<SymbolId>],
    cfg: LearnerConfig,
    slots: Vec<StateId>,
    slot_of: HashMap<StateId, usize>,
    alive: Vec<bool>,
    preds: HashMap<StateId, BTreeSet<StateId>>,
    trans_stat: HashMap<StateId, RowStat>,
    emit_stat: HashMap<StateId, RowStat>,
    table: PairTable,
    posterior: f64,
    merges: usize,
    rejected: usize,
}

impl<'x> Engine<'x> {
    fn new(model: Hmm, data: &'x [Vec<SymbolId>], cfg: &LearnerConfig) -> Self {
        let slots: Vec<StateId> = model.states().keys().copied().collect();
        let slot_of = slots.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut preds: HashMap<StateId, BTreeSet<StateId>> =
            slots.iter().map(|&s| (s, BTreeSet::new())).collect();
        for &t in model.init().counts().keys() {
            preds.entry(t).or_default().insert(StateId::START);
        }
        for (&id, st) in model.states() {
            for &t in st.trans.counts().keys() {
                if t.is_emitting() {
                    preds.entry(t).or_default().insert(id);
                }
            }
        }
        let posterior = exact_posterior(&model, data, cfg);
        let n = slots.len();
        let mut engine = Engine {
            model,
            data,
            cfg: *cfg,
            slots,
            slot_of,
            alive: vec![true; n],
            preds,
            trans_stat: HashMap::new(),
            emit_stat: HashMap::new(),
            table: PairTable::new(n),
            posterior,
            merges: 0,
            rejected: 0,
        };
        engine.refresh_stat(StateId::START);
        for id in engine.slots.clone() {
            engine.refresh_stat(id);
        }
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        engine.rescore(all);
        engine
    }

    fn trans_row(&self, id: StateId) -> &Row<StateId> {
        if id == StateId::START {
            self.model.init()
        } else {
            &self.model.state(id).expect("live state").trans
        }
    }

    fn refresh_stat(&mut self, id: StateId) {
        let alpha = self.cfg.dirichlet_alpha;
        let t = RowStat::of(self.trans_row(id).counts().values(), alpha);
        self.trans_stat.insert(id, t);
        if id.is_emitting() {
            let e = RowStat::of(
                self.model
                    .state(id)
                    .expect("live state")
                    .emit
                    .counts()
                    .values(),
                self.cfg.dirichlet_beta,
            );
            self.emit_stat.insert(id, e);
        }
    }

    /// Change of the count-based posterior if `a` and `b` were merged.
    fn ranking_delta(&self, a: StateId, b: StateId) -> f64 {
        let LearnerConfig {
            dirichlet_alpha: alpha,
            dirichlet_beta: beta,
            structure_lambda: lambda,
            ..
        } = self.cfg;
        let keep = a.min(b);
        let sa = self.model.state(a).expect("live state");
        let sb = self.model.state(b).expect("live state");

        let mut emit: HashMap<SymbolId, f64> =
            sa.emit.counts().iter().map(|(&k, &c)| (k, c)).collect();
        for (&k, &c) in sb.emit.counts() {
            *emit.entry(k).or_insert(0.0) += c;
        }
        let emit_m = RowStat::of(emit.values(), beta);
        let (ea, eb) = (self.emit_stat[&a], self.emit_stat[&b]);
        let mut score = emit_m.score(beta) - ea.score(beta) - eb.score(beta);
        let mut size_change = -1.0 + emit_m.k as f64 - ea.k as f64 - eb.k as f64;

        let mut trans: HashMap<StateId, f64> = HashMap::new();
        for (&t, &c) in sa.trans.counts().iter().chain(sb.trans.counts()) {
            let t = if t == a || t == b { keep } else { t };
            *trans.entry(t).or_insert(0.0) += c;
        }
        let trans_m = RowStat::of(trans.values(), alpha);
        let (ta, tb) = (self.trans_stat[&a], self.trans_stat[&b]);
        score += trans_m.score(alpha) - ta.score(alpha) - tb.score(alpha);
        size_change += trans_m.k as f64 - ta.k as f64 - tb.k as f64;

        let (pa, pb) = (&self.preds[&a], &self.preds[&b]);
        let (small, large) = if pa.len() <= pb.len() {
            (pa, pb)
        } else {
            (pb, pa)
        };
        for &p in small {
            if p == a || p == b || !large.contains(&p) {
                continue;
            }
            let row = self.trans_row(p);
            let before = self.trans_stat[&p];
            let after = before.fold(row.count(&a), row.count(&b), alpha);
            score += after.score(alpha) - before.score(alpha);
            size_change -= 1.0;
        }
        score - lambda * size_change
    }

    fn rescore(&mut self, pairs: Vec<(usize, usize)>) {
        let scored: Vec<(usize, usize, f64)> = pairs
            .into_par_iter()
            .map(|(i, j)| (i, j, self.ranking_delta(self.slots[i], self.slots[j])))
            .collect();
        for (i, j, d) in scored {
            self.table.set(i, j, d);
        }
    }

    fn best_pair(&mut self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.table.n {
            if !self.alive[i] {
                continue;
            }
            if let Some((v, j)) = self.table.row_max(i, &self.alive) {
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        best
    }

    fn run<F: FnMut(&MergeStep, &Hmm)>(
        &mut self,
        budget: Option<usize>,
        step_index: &mut usize,
        observer: &mut F,
    ) {
        while budget.is_none_or(|b| self.merges < b) {
            let Some((i, j, ranking_delta)) = self.best_pair() else {
                break;
            };
            // NaN counts as no improvement
            if ranking_delta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                break;
            }
            let (a, b) = (self.slots[i], self.slots[j]);
            let removed = a.max(b);
            let preds_removed: Vec<StateId> = self.preds[&removed].iter().copied().collect();
            let mut candidate = self.model.clone();
            candidate.merge_with_preds(a, b, &preds_removed);
            let after = exact_posterior(&candidate, self.data, &self.cfg);
            if after.partial_cmp(&self.posterior) != Some(std::cmp::Ordering::Greater) {
                self.rejected += 1;
                self.table.set(i, j, f64::NEG_INFINITY);
                continue;
            }
            let step = MergeStep {
                index: *step_index,
                candidate: MergeCandidate {
                    state_a: a,
                    state_b: b,
                    delta_log_posterior: after - self.posterior,
                },
                ranking_delta,
                log_posterior_before: self.posterior,
                log_posterior_after: after,
            };
            assert!(
                step.log_posterior_after > step.log_posterior_before,
                "accepted merge must raise the posterior"
            );
            self.apply(a, b, candidate);
            self.posterior = after;
            self.merges += 1;
            *step_index += 1;
            observer(&step, &self.model);
        }
    }

    fn apply(&mut self, a: StateId, b: StateId, merged: Hmm) {
        let (keep, removed) = (a.min(b), a.max(b));
        let preds_keep = self.preds.remove(&keep).unwrap_or_default();
        let preds_removed = self.preds.remove(&removed).unwrap_or_default();
        let succ_removed: Vec<StateId> = self
            .model
            .state(removed)
            .expect("live state")
            .trans
            .counts()
            .keys()
            .copied()
            .filter(|t| t.is_emitting())
            .collect();
        self.model = merged;

        let both: Vec<StateId> = preds_removed
            .iter()
            .copied()
            .filter(|p| *p != keep && *p != removed && preds_keep.contains(p))
            .collect();
        let only: Vec<StateId> = preds_removed
            .iter()
            .copied()
            .filter(|p| *p != keep && *p != removed && !preds_keep.contains(p))
            .collect();

        let fold = |s: StateId| if s == removed { keep } else { s };
        let preds_merged: BTreeSet<StateId> = preds_keep
            .iter()
            .chain(&preds_removed)
            .map(|&p| fold(p))
            .collect();
        for s in succ_removed {
            if s == keep || s == removed {
                continue;
            }
            if let Some(ps) = self.preds.get_mut(&s) {
                ps.remove(&removed);
                ps.insert(keep);
            }
        }
        self.preds.insert(keep, preds_merged.clone());

        self.trans_stat.remove(&removed);
        self.emit_stat.remove(&removed);
        self.refresh_stat(keep);
        for &p in both.iter().chain(&only) {
            self.refresh_stat(p);
        }

        let r = self.slot_of[&removed];
        self.alive[r] = false;
        for i in 0..r {
            if self.table.row_best[i].is_some_and(|(_, arg)| arg == r) {
                self.table.dirty[i] = true;
            }
        }

        let live_slot = |s: StateId| -> Option<usize> {
            self.slot_of.get(&s).copied().filter(|&i| self.alive[i])
        };
        let mut pairs: HashSet<(usize, usize)> = HashSet::new();
        let mut add = |x: usize, y: usize| {
            if x != y {
                pairs.insert((x.min(y), x.max(y)));
            }
        };
        let all_live: Vec<usize> = (0..self.slots.len()).filter(|&i| self.alive[i]).collect();
        let k = self.slot_of[&keep];
        for &y in &all_live {
            add(k, y);
        }
        for &p in &both {
            if let Some(pi) = live_slot(p) {
                for &y in &all_live {
                    add(pi, y);
                }
            }
        }
        let merged_preds: Vec<usize> = preds_merged.iter().filter_map(|&p| live_slot(p)).collect();
        for &p in &only {
            if let Some(pi) = live_slot(p) {
                for &y in &merged_preds {
                    add(pi, y);
                }
            }
        }
        for q in std::iter::once(keep).chain(both.iter().copied()) {
            let succ: Vec<usize> = self
                .trans_row(q)
                .counts()
                .keys()
                .filter_map(|&t| live_slot(t))
                .collect();
            for (n, &x) in succ.iter().enumerate() {
                for &y in &succ[n + 1..] {
                    add(x, y);
                }
            }
        }
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        self.rescore(pairs);
    }
}
