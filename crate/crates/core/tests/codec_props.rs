use proptest::prelude::*;
use vectormorph::codec::{
    apply_layer, canonicalize, decode_fixpoint, decode_str, encode, CodecError, EncodeMode, Layer,
    DEFAULT_MAX_PASSES,
};

fn attackish() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<".to_string()),
        Just(">".to_string()),
        Just("\"".to_string()),
        Just("&".to_string()),
        Just("%".to_string()),
        Just("%3c".to_string()),
        Just("%253E".to_string()),
        Just("&lt".to_string()),
        Just("&#x27;".to_string()),
        Just("&amp;lt;".to_string()),
        Just("script".to_string()),
        "[ -~]{0,4}",
        "\\PC{0,2}",
    ];
    proptest::collection::vec(piece, 0..12).prop_map(|v| v.concat())
}

fn output(s: &str) -> String {
    decode_str(s).unwrap().output
}

proptest! {
    #[test]
    fn encoding_adds_one_reversible_layer(s in attackish()) {
        for mode in EncodeMode::ALL {
            prop_assert_eq!(output(&encode(&s, mode)), output(&s), "{}", mode);
        }
    }

    #[test]
    fn decoding_is_idempotent(s in attackish()) {
        let once = decode_str(&s).unwrap();
        let twice = decode_str(&once.output).unwrap();
        prop_assert_eq!(&twice.output, &once.output);
        prop_assert_eq!(twice.passes, 1);
        prop_assert!(twice.layers.is_empty());
        prop_assert_eq!(canonicalize(&s), once.output);
    }

    #[test]
    fn any_bytes_are_accepted(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        match decode_fixpoint(&bytes, DEFAULT_MAX_PASSES) {
            Ok(t) => prop_assert!(t.passes >= 1 && t.passes <= DEFAULT_MAX_PASSES),
            Err(e) => prop_assert_eq!(e, CodecError::FixpointNotReached { max_passes: DEFAULT_MAX_PASSES }),
        }
    }

    #[test]
    fn stacked_layers_peel_one_per_pass(s in attackish(), depth in 1usize..5) {
        let c = canonicalize(&s);
        let mut wrapped = c.clone();
        for _ in 0..depth {
            wrapped = apply_layer(&wrapped, EncodeMode::PercentAll);
        }
        let t = decode_str(&wrapped).unwrap();
        prop_assert_eq!(t.output, c.clone());
        if c.is_empty() {
            prop_assert_eq!(t.passes, 1);
        } else {
            prop_assert!(t.passes <= depth + 1);
        }
    }
}

#[test]
fn documented_examples() {
    let t = decode_str("%3Cscript%3E").unwrap();
    assert_eq!((t.output.as_str(), t.passes), ("<script>", 2));
    assert_eq!(t.layers, vec![Layer::Percent]);
    let t = decode_str("&lt;script&gt;").unwrap();
    assert_eq!((t.output.as_str(), t.passes), ("<script>", 2));
    let t = decode_str("%253Cscript%253E").unwrap();
    assert_eq!((t.output.as_str(), t.passes), ("<script>", 3));
    assert_eq!(
        encode("<script>", EncodeMode::PercentAll),
        "%3C%73%63%72%69%70%74%3E"
    );
    assert_eq!(
        encode("<script>", EncodeMode::EntityNumeric),
        "&#60;script&#62;"
    );
    assert_eq!(encode("abc", EncodeMode::PercentReserved), "abc");
}

#[test]
fn plus_is_not_a_space() {
    assert_eq!(output("a+b"), "a+b");
}

#[test]
fn semicolonless_entities_decode() {
    assert_eq!(output("&lt&#60&#x3c"), "<<<");
}

#[test]
fn pass_limit_is_enforced() {
    let mut s = "<".to_string();
    for _ in 0..10 {
        s = apply_layer(&s, EncodeMode::PercentAll);
    }
    assert_eq!(
        decode_fixpoint(s.as_bytes(), 4),
        Err(CodecError::FixpointNotReached { max_passes: 4 })
    );
    assert_eq!(decode_fixpoint(b"x", 0), Err(CodecError::InvalidMaxPasses));
    assert_eq!(canonicalize(&s), s);
}
