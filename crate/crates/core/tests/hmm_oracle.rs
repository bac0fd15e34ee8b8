mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vectormorph::hmm::{Alphabet, Hmm, HmmError, Smoothing, StateId};
use vectormorph::learner::incorporate;
use vectormorph::tokenizer::TokenSymbol;

use common::*;

fn chain_model(xs: &[Vec<TokenSymbol>]) -> Hmm {
    let mut m = Hmm::new(Alphabet::default(), Smoothing::default());
    for x in xs {
        incorporate(&mut m, x);
    }
    m
}

fn word() -> impl Strategy<Value = Vec<TokenSymbol>> {
    proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just("c")], 1..5)
        .prop_map(|v| v.into_iter().map(sym).collect())
}

#[test]
fn larger_random_models_match_enumeration() {
    for seed in [11u64, 12, 13] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..500 {
            let m = random_hmm(&mut rng, 7, 4);
            let x = random_sequence(&mut rng, &m, 6);
            let ll = m.sequence_log_likelihood(&x).unwrap();
            assert!(
                close(ll, brute_log_likelihood(&m, &x), 1e-9),
                "seed {seed} model {i}"
            );
            match (m.viterbi(&x), brute_viterbi(&m, &x)) {
                (Ok(v), Some((path, lp))) => {
                    assert_eq!(v.path, path, "seed {seed} model {i}");
                    assert!(close(v.log_prob, lp, 1e-9));
                    assert!(v.log_prob <= ll + 1e-12);
                }
                (Err(HmmError::NoPath), None) => assert_eq!(ll, f64::NEG_INFINITY),
                (got, want) => panic!("seed {seed} model {i}: {got:?} vs {want:?}"),
            }
        }
    }
}

#[test]
fn chain_of_one_sequence_is_certain() {
    let m = chain_model(&[letters("abca")]);
    assert_eq!(m.num_states(), 4);
    assert_eq!(m.sequence_log_likelihood(&letters("abca")).unwrap(), 0.0);
    assert_eq!(
        m.sequence_log_likelihood(&letters("abc")).unwrap(),
        f64::NEG_INFINITY
    );
    assert!(matches!(m.viterbi(&letters("abc")), Err(HmmError::NoPath)));
}

#[test]
fn unknown_symbols_are_an_error() {
    let m = chain_model(&[letters("ab")]);
    assert!(m.sequence_log_likelihood(&letters("az")).is_err());
}

#[test]
fn merge_rejects_reserved_and_missing_states() {
    let mut m = chain_model(&[letters("ab")]);
    assert!(m.merge_states(StateId::START, StateId(2)).is_err());
    assert!(m.merge_states(StateId(2), StateId::END).is_err());
    assert!(m.merge_states(StateId(2), StateId(2)).is_err());
    assert!(m.merge_states(StateId(2), StateId(40)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merging_conserves_counts_and_coverage(
        xs in proptest::collection::vec(word(), 1..5),
        picks in proptest::collection::vec((0usize..64, 0usize..64), 1..6),
    ) {
        let mut m = chain_model(&xs);
        let emit_total = |m: &Hmm| m.states().values().map(|s| s.emit.total()).sum::<f64>();
        let trans_total = |m: &Hmm| m.states().values().map(|s| s.trans.total()).sum::<f64>();
        let before = emit_total(&m);
        let edges = trans_total(&m);
        let init_total = m.init().total();
        for (i, j) in picks {
            let ids: Vec<StateId> = m.states().keys().copied().collect();
            if ids.len() < 2 {
                break;
            }
            let (a, b) = (ids[i % ids.len()], ids[j % ids.len()]);
            if a == b {
                continue;
            }
            let n = m.num_states();
            let kept = m.merge_states(a, b).unwrap();
            prop_assert_eq!(kept, a.min(b));
            prop_assert_eq!(m.num_states(), n - 1);
            prop_assert!(m.validate().is_ok());
            prop_assert_eq!(emit_total(&m), before);
            prop_assert_eq!(trans_total(&m), edges);
            prop_assert_eq!(m.init().total(), init_total);
            for x in &xs {
                prop_assert!(m.sequence_log_likelihood(x).unwrap() > f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn viterbi_never_exceeds_likelihood(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_hmm(&mut rng, 5, 3);
        let x = random_sequence(&mut rng, &m, 6);
        let ll = m.sequence_log_likelihood(&x).unwrap();
        if let Ok(v) = m.viterbi(&x) {
            prop_assert!(v.log_prob <= ll + 1e-12);
            prop_assert!(close(path_log_prob(&m, &x, &v.path), v.log_prob, 1e-9));
        } else {
            prop_assert_eq!(ll, f64::NEG_INFINITY);
        }
    }
}
