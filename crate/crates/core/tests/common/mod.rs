//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vectormorph::hmm::{Alphabet, EmittingState, Hmm, Row, Smoothing, StateId, SymbolId};
use vectormorph::learner::{LearnerConfig, LikelihoodMode};
use vectormorph::tokenizer::TokenSymbol;

pub fn sym(name: &str) -> TokenSymbol {
    TokenSymbol::start_tag(name)
}

/// `"abab"` as four start-tag symbols.
pub fn letters(s: &str) -> Vec<TokenSymbol> {
    s.chars().map(|c| sym(&c.to_string())).collect()
}

/// Every positive-probability state path for `x` with its probability.
pub fn all_paths(m: &Hmm, x: &[TokenSymbol]) -> Vec<(Vec<StateId>, f64)> {
    let Ok(ids) = m.alphabet().encode(x) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut path = Vec::new();
    for (&s, &p) in m.init().probs() {
        extend(m, &ids, s, p, &mut path, &mut out);
    }
    out
}

fn extend(
    m: &Hmm,
    x: &[SymbolId],
    s: StateId,
    p: f64,
    path: &mut Vec<StateId>,
    out: &mut Vec<(Vec<StateId>, f64)>,
) {
    let st = m.state(s).unwrap();
    let e = st.emit.prob(&x[path.len()]);
    if e == 0.0 || p == 0.0 {
        return;
    }
    let p = p * e;
    path.push(s);
    if path.len() == x.len() {
        let end = st.trans.prob(&StateId::END);
        if end > 0.0 {
            out.push((path.clone(), p * end));
        }
    } else {
        for (&t, &q) in st.trans.probs() {
            if t != StateId::END {
                extend(m, x, t, p * q, path, out);
            }
        }
    }
    path.pop();
}

/// Log of the summed path probabilities.
pub fn brute_log_likelihood(m: &Hmm, x: &[TokenSymbol]) -> f64 {
    let total: f64 = all_paths(m, x).iter().map(|(_, p)| p).sum();
    total.ln()
}

/// Log-probability of one path, accumulated term by term in log space.
pub fn path_log_prob(m: &Hmm, x: &[TokenSymbol], path: &[StateId]) -> f64 {
    let ids = m.alphabet().encode(x).unwrap();
    let mut lp = m.init().prob(&path[0]).ln();
    for (i, &s) in path.iter().enumerate() {
        let st = m.state(s).unwrap();
        lp += st.emit.prob(&ids[i]).ln();
        let next = path.get(i + 1).copied().unwrap_or(StateId::END);
        lp += st.trans.prob(&next).ln();
    }
    lp
}

/// Best path; ties (up to rounding noise) go to the lexicographically
/// smallest state sequence.
pub fn brute_viterbi(m: &Hmm, x: &[TokenSymbol]) -> Option<(Vec<StateId>, f64)> {
    let mut scored: Vec<(Vec<StateId>, f64)> = all_paths(m, x)
        .into_iter()
        .map(|(path, _)| {
            let lp = path_log_prob(m, x, &path);
            (path, lp)
        })
        .collect();
    let best = scored
        .iter()
        .map(|(_, lp)| *lp)
        .fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-12 * best.abs().max(1.0);
    scored.retain(|(_, lp)| *lp >= best - slack);
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    scored.into_iter().next().map(|(path, _)| (path, best))
}

fn ln_dirichlet(probs: &[f64], conc: f64) -> f64 {
    let probs: Vec<f64> = probs.iter().copied().filter(|&p| p > 0.0).collect();
    let k = probs.len() as f64;
    if probs.len() < 2 {
        return 0.0;
    }
    libm::lgamma(k * conc) - k * libm::lgamma(conc)
        + (conc - 1.0) * probs.iter().map(|p| p.ln()).sum::<f64>()
}

/// Prior recomputed from the model's rows.
pub fn brute_log_prior(m: &Hmm, cfg: &LearnerConfig) -> f64 {
    let mut lp = ln_dirichlet(
        &m.init().probs().values().copied().collect::<Vec<_>>(),
        cfg.dirichlet_alpha,
    );
    let mut size = m.states().len();
    size += m.init().probs().len();
    for st in m.states().values() {
        let t: Vec<f64> = st.trans.probs().values().copied().collect();
        let e: Vec<f64> = st.emit.probs().values().copied().collect();
        size += t.len() + e.len();
        lp += ln_dirichlet(&t, cfg.dirichlet_alpha) + ln_dirichlet(&e, cfg.dirichlet_beta);
    }
    lp - cfg.structure_lambda * size as f64
}

/// Posterior from path enumeration.
pub fn brute_log_posterior(m: &Hmm, xs: &[Vec<TokenSymbol>], cfg: &LearnerConfig) -> f64 {
    let ll: f64 = xs
        .iter()
        .map(|x| match cfg.likelihood_mode {
            LikelihoodMode::ForwardExact => brute_log_likelihood(m, x),
            LikelihoodMode::ViterbiApprox => {
                brute_viterbi(m, x).map_or(f64::NEG_INFINITY, |(_, lp)| lp)
            }
        })
        .sum();
    brute_log_prior(m, cfg) + ll
}

fn random_row<K: Ord + Copy>(rng: &mut ChaCha8Rng, keys: &[K]) -> Row<K> {
    let mut chosen: Vec<K> = keys
        .iter()
        .copied()
        .filter(|_| rng.random_bool(0.6))
        .collect();
    if chosen.is_empty() {
        chosen.push(keys[rng.random_range(0..keys.len())]);
    }
    let weights: Vec<f64> = chosen.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let probs: BTreeMap<K, f64> = chosen
        .into_iter()
        .zip(weights.iter().map(|w| w / total))
        .collect();
    Row::from_probs(probs)
}

/// Random sparse model with up to `max_states` states over up to
/// `max_symbols` symbols.
pub fn random_hmm(rng: &mut ChaCha8Rng, max_states: usize, max_symbols: usize) -> Hmm {
    let n = rng.random_range(1..=max_states);
    let k = rng.random_range(1..=max_symbols);
    let alphabet = Alphabet::from_symbols((0..k).map(|i| sym(&format!("s{i}"))));
    let states: Vec<StateId> = (0..n as u32).map(|i| StateId(i + 2)).collect();
    let symbols: Vec<SymbolId> = (0..k as u32).map(SymbolId).collect();
    let mut targets = states.clone();
    targets.push(StateId::END);
    let init = random_row(rng, &states);
    let rows: BTreeMap<StateId, EmittingState> = states
        .iter()
        .map(|&s| {
            (
                s,
                EmittingState {
                    trans: random_row(rng, &targets),
                    emit: random_row(rng, &symbols),
                },
            )
        })
        .collect();
    Hmm::from_rows(alphabet, Smoothing::default(), init, rows).unwrap()
}

/// Random symbol string over the model's alphabet.
pub fn random_sequence(rng: &mut ChaCha8Rng, m: &Hmm, max_len: usize) -> Vec<TokenSymbol> {
    let len = rng.random_range(1..=max_len);
    let symbols: Vec<TokenSymbol> = m.alphabet().iter().cloned().collect();
    (0..len)
        .map(|_| symbols[rng.random_range(0..symbols.len())].clone())
        .collect()
}

/// Sequence drawn from the model itself, or `None` if the walk runs long.
pub fn sample_sequence(rng: &mut ChaCha8Rng, m: &Hmm, max_len: usize) -> Option<Vec<TokenSymbol>> {
    let pick = |rng: &mut ChaCha8Rng, row: &BTreeMap<StateId, f64>| -> StateId {
        let mut r = rng.random::<f64>();
        for (&k, &p) in row {
            if r < p {
                return k;
            }
            r -= p;
        }
        *row.keys().next_back().unwrap()
    };
    let mut out = Vec::new();
    let mut s = pick(rng, m.init().probs());
    while s != StateId::END {
        if out.len() == max_len {
            return None;
        }
        let st = m.state(s).unwrap();
        let mut r = rng.random::<f64>();
        let mut chosen = *st.emit.probs().keys().next_back().unwrap();
        for (&k, &p) in st.emit.probs() {
            if r < p {
                chosen = k;
                break;
            }
            r -= p;
        }
        out.push(m.alphabet().symbol(chosen).clone());
        s = pick(rng, st.trans.probs());
    }
    Some(out)
}

/// Close enough for log-space comparisons, treating matching infinities as equal.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol
}
