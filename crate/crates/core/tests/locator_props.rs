use proptest::prelude::*;
use vectormorph::locator::{
    locate_attack, reassemble_query, score_features, split_candidates, CandidateSource, Locator,
    LocatorError, Weights,
};

fn value() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        "[a-z0-9]{1,4}",
        Just("%22%3E".to_string()),
        Just("%3Cscript%3E".to_string()),
        Just("&lt;b&gt;".to_string()),
        Just("'".to_string()),
        Just("+".to_string()),
        Just("alert(1)".to_string()),
        Just("=".to_string()),
        Just("onload=".to_string()),
    ];
    proptest::collection::vec(piece, 0..5).prop_map(|v| v.concat())
}

fn query() -> impl Strategy<Value = String> {
    let pair = ("[a-z]{1,3}", value(), any::<bool>())
        .prop_map(|(k, v, semi)| (format!("{k}={v}"), if semi { ';' } else { '&' }));
    proptest::collection::vec(pair, 1..5).prop_map(|pairs| {
        let mut q = String::new();
        for (i, (p, sep)) in pairs.into_iter().enumerate() {
            if i > 0 {
                q.push(sep);
            }
            q.push_str(&p);
        }
        q
    })
}

fn weights() -> impl Strategy<Value = [f64; 6]> {
    proptest::array::uniform6(0.0f64..10.0)
}

proptest! {
    #[test]
    fn split_then_reassemble_is_exact(q in query()) {
        let url = format!("http://h/p.php?{q}");
        let cands = split_candidates(&url).unwrap();
        prop_assert_eq!(reassemble_query(&cands), q);
        for c in &cands {
            prop_assert_eq!(&url[c.span.clone()], c.raw.as_str());
        }
    }

    #[test]
    fn argmax_ignores_weight_scale(q in query(), w in weights(), c in 0.01f64..100.0) {
        let url = format!("http://h/p.php?{q}");
        let base = Locator::new(Weights::new(w).unwrap()).locate_attack(&url).unwrap();
        let scaled = Locator::new(Weights::new(w.map(|x| x * c)).unwrap()).locate_attack(&url).unwrap();
        prop_assert_eq!(base.candidate.span, scaled.candidate.span);
    }

    #[test]
    fn appending_script_never_lowers_a_score(s in "\\PC{0,40}", w in weights()) {
        let w = Weights::new(w).unwrap();
        let before = score_features(&s);
        let after = score_features(&format!("{s}<script>"));
        prop_assert!(w.dot(&after) >= w.dot(&before));
        for (a, b) in after.iter().zip(before) {
            prop_assert!(*a >= b && *a <= 1.0 && b >= 0.0);
        }
    }

    #[test]
    fn appending_encoded_script_in_a_url(q in query(), pick in any::<prop::sample::Index>()) {
        let url = format!("http://h/p.php?{q}");
        let cands = split_candidates(&url).unwrap();
        let target = &cands[pick.index(cands.len())];
        let mut grown = url.clone();
        grown.insert_str(target.span.end, "%3Cscript%3E");
        let after = split_candidates(&grown).unwrap();
        let same = after.iter().find(|c| c.span.start == target.span.start).unwrap();
        prop_assert!(same.score >= target.score);
    }
}

#[test]
fn motivating_url() {
    let url = "http://h/search.php?x=1&keyword=%22%3E%3Cscript%3Ealert(123)%3C/script%3E";
    let a = locate_attack(url).unwrap();
    assert_eq!(a.candidate.param_name, "keyword");
    assert_eq!(a.candidate.decoded, "\"><script>alert(123)</script>");
    assert_eq!(a.all_candidates.len(), 2);
}

#[test]
fn plain_split_and_fragment() {
    let c = split_candidates("http://h/a?x=1&y=2").unwrap();
    assert_eq!(
        c.iter().map(|c| c.decoded.as_str()).collect::<Vec<_>>(),
        ["1", "2"]
    );
    let c = split_candidates("http://h/p#<svg onload=alert(1)>").unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].source, CandidateSource::Fragment);
}

#[test]
fn singleton_and_ties() {
    assert_eq!(
        locate_attack("http://h/a?q=hello")
            .unwrap()
            .candidate
            .decoded,
        "hello"
    );
    let a = locate_attack("http://h/a?a=%3Cb%3E&b=%3Cb%3E").unwrap();
    assert_eq!(a.candidate.param_name, "a");
}

#[test]
fn feature_examples() {
    assert_eq!(score_features(""), [0.0; 6]);
    let f = score_features("\"><script>alert(1)</script>");
    assert_eq!(&f[..4], &[1.0, 1.0, 1.0, 0.0]);
    assert!(f[4] > 0.0 && f[5] > 0.3);
    let f = score_features("hello");
    assert_eq!(f.iter().filter(|&&x| x != 0.0).count(), 1);
    assert!(f[4] > 0.0);
}

#[test]
fn no_candidates() {
    assert!(matches!(
        locate_attack("http://h/index.html"),
        Err(LocatorError::NoCandidates(_))
    ));
    assert!(Weights::new([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
}
