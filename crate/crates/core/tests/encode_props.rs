//! Transformation and token encoding properties.

use std::collections::{BTreeSet, HashSet};

use looptune::encode::{
    build_freq_maps, build_freq_maps_checked, decode_transformation, encode_transformation,
    encode_transformation_onehot, onehot_vocab, train_embeddings, EmbeddingConfig, EncodeError, Encoder,
    EncodingMethod, TVEC_LEN,
};
use looptune::lexer::{tokenize_loop, Token, TokenKind, TokenSeq};
use looptune::mutate::{StepKind, TransformationSeq, TransformationStep};
use proptest::prelude::*;

mod common;
use common::full_grammar;

fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn kinds(s: &TransformationSeq) -> BTreeSet<StepKind> {
    s.steps.iter().map(|t| t.kind()).collect()
}

/// Every variant of `step` with exactly one parameter changed.
fn one_param_changes(step: &TransformationStep) -> Vec<TransformationStep> {
    use TransformationStep::*;
    match *step {
        Unrolling { factor } => [2, 4, 8].into_iter().filter(|&f| f != factor).map(|f| Unrolling { factor: f }).collect(),
        UnrollAndJam { level, factor } => {
            let mut v: Vec<_> = (1..=3).filter(|&l| l != level).map(|l| UnrollAndJam { level: l, factor }).collect();
            v.extend([2, 4].into_iter().filter(|&f| f != factor).map(|f| UnrollAndJam { level, factor: f }));
            v
        }
        Tiling { level, size } => {
            let mut v: Vec<_> = (1..=4).filter(|&l| l != level).map(|l| Tiling { level: l, size }).collect();
            v.extend([8, 16, 32].into_iter().filter(|&s| s != size).map(|s| Tiling { level, size: s }));
            v
        }
        Interchange { perm } => (1..=29).filter(|&p| p != perm).map(|p| Interchange { perm: p }).collect(),
        Distribution => vec![],
    }
}

#[test]
fn grammar_size_and_exhaustive_round_trip() {
    let all = full_grammar();
    assert_eq!(all.len(), 30 * 19 * 2 * 4 - 1);
    for s in &all {
        s.validate().unwrap();
        let v = encode_transformation(s).unwrap();
        assert_eq!(v.values.len(), TVEC_LEN);
        assert_eq!(&decode_transformation(&v).unwrap(), s);
        let text = s.to_string();
        assert_eq!(&text.parse::<TransformationSeq>().unwrap(), s);
    }
}

#[test]
fn encoding_is_injective() {
    let all = full_grammar();
    let distinct: HashSet<Vec<u64>> =
        all.iter().map(|s| encode_transformation(s).unwrap().values.iter().map(|x| x.to_bits()).collect()).collect();
    assert_eq!(distinct.len(), all.len());
}

#[test]
fn unrolling_by_two_sets_first_two_entries() {
    let v = encode_transformation(&"unrolling(factor=2)".parse().unwrap()).unwrap();
    let mut expected = vec![0.0; 56];
    expected[0] = 1.0;
    expected[1] = 1.0;
    assert_eq!(v.values, expected);
}

#[test]
fn one_parameter_change_flips_two_entries() {
    let mut checked = 0;
    for s in full_grammar() {
        let v = encode_transformation(&s).unwrap().values;
        for (i, step) in s.steps.iter().enumerate() {
            for changed in one_param_changes(step) {
                let mut t = s.clone();
                t.steps[i] = changed;
                let w = encode_transformation(&t).unwrap().values;
                assert_eq!(hamming(&v, &w), 2, "{s} vs {t}");
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn shared_steps_are_closer_than_disjoint_ones() {
    let all = full_grammar();
    let enc: Vec<Vec<f64>> = all.iter().map(|s| encode_transformation(s).unwrap().values).collect();
    let ks: Vec<BTreeSet<StepKind>> = all.iter().map(kinds).collect();
    for i in 0..all.len() {
        let mut worst_shared = 0;
        let mut best_disjoint = usize::MAX;
        for j in 0..all.len() {
            if i == j || all[i].steps.len() != all[j].steps.len() {
                continue;
            }
            let d = hamming(&enc[i], &enc[j]);
            if ks[i].is_disjoint(&ks[j]) {
                best_disjoint = best_disjoint.min(d);
            } else {
                worst_shared = worst_shared.max(d);
            }
        }
        if best_disjoint != usize::MAX {
            assert!(worst_shared < best_disjoint, "{}: shared {worst_shared} vs disjoint {best_disjoint}", all[i]);
        }
    }
}

#[test]
fn onehot_transformations() {
    let seqs: Vec<TransformationSeq> = ["unrolling(factor=2)", "unrolling(factor=2)", "distribution()", "interchange(perm=1)"]
        .iter()
        .map(|d| d.parse().unwrap())
        .collect();
    let vocab = onehot_vocab(&seqs, 2);
    assert_eq!(vocab[0].to_string(), "unrolling(factor=2)");
    assert_eq!(vocab[1].to_string(), "distribution()");
    assert_eq!(encode_transformation_onehot(&seqs[2], &vocab).unwrap(), vec![0.0, 1.0]);
    assert!(matches!(encode_transformation_onehot(&seqs[3], &vocab), Err(EncodeError::UnknownTransformation(_))));
}

const SAMPLE_LOOPS: [&str; 3] = [
    "for (i = 0; i < n; i++) a[i] = b[i] * 2.5 + c;",
    "for (int j = 1; j <= 255; j += 1) { if (x[j] > 'a') y[j] = 0x1F; else y[j] = 77; }",
    "for (k = 0; k < 100; k++) s += v[k] * w[k];",
];

fn training_corpus() -> Vec<TokenSeq> {
    SAMPLE_LOOPS.iter().enumerate().map(|(i, s)| tokenize_loop(&format!("l{i}"), s).unwrap()).collect()
}

fn encoders() -> Vec<Encoder> {
    let corpus = training_corpus();
    let freq = build_freq_maps(&corpus);
    let emb = train_embeddings(&corpus, &EmbeddingConfig { dim: 8, epochs: 2, ..EmbeddingConfig::default() });
    [
        EncodingMethod::Fixed { n: 12 },
        EncodingMethod::Basic,
        EncodingMethod::TypeBased,
        EncodingMethod::Renaming { m: 5 },
        EncodingMethod::Complex { c: 60 },
        EncodingMethod::FastText,
    ]
    .into_iter()
    .map(|m| Encoder::new(m, Some(&freq), Some(&emb), 40).unwrap())
    .collect()
}

fn arb_token() -> impl Strategy<Value = Token> {
    prop_oneof![
        prop::sample::select(vec!["for", "int", "if", "double", "while"]).prop_map(Token::keyword),
        "[a-z_][a-z0-9_]{0,6}".prop_map(Token::ident),
        (0i64..100_000).prop_map(Token::int),
        prop::sample::select(vec!["+", "=", "<", "++", "+=", "*", "->"]).prop_map(Token::op),
        prop::sample::select(vec!["(", ")", "[", "]", "{", "}", ";", ","]).prop_map(Token::punct),
        "[0-9]{1,3}\\.[0-9]{1,3}".prop_map(|t| Token::new(TokenKind::FloatLiteral, t)),
        Just(Token::new(TokenKind::CharLiteral, "'q'")),
        Just(Token::new(TokenKind::StringLiteral, "\"s\"")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn onehot_segments_and_padding(tokens in prop::collection::vec(arb_token(), 1..40)) {
        let seq = TokenSeq::new("p", tokens);
        for enc in encoders() {
            let out = enc.encode(&seq, None).unwrap();
            prop_assert_eq!(out.matrix.len(), 40 * enc.channels());
            prop_assert_eq!(out.len, seq.len());
            for r in 0..out.len {
                for seg in enc.onehot_segments() {
                    let row = &out.row(r)[seg];
                    prop_assert!(row.iter().all(|&x| x == 0.0 || x == 1.0));
                    prop_assert!(row.iter().sum::<f64>() <= 1.0);
                }
            }
            for r in out.len..40 {
                prop_assert!(out.row(r).iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn too_long_sequences_are_rejected() {
    let seq = tokenize_loop("long", &"a = a + 1; ".repeat(20)).unwrap();
    for enc in encoders() {
        assert!(matches!(enc.encode(&seq, None), Err(EncodeError::TooLong { .. })));
    }
}

#[test]
fn frequency_maps_reject_validation_loops() {
    let corpus = training_corpus();
    let val: BTreeSet<String> = ["l1".to_string()].into();
    assert!(matches!(build_freq_maps_checked(&corpus, &val), Err(EncodeError::ValidationLeak(id)) if id == "l1"));
    let other: BTreeSet<String> = ["z".to_string()].into();
    assert_eq!(build_freq_maps_checked(&corpus, &other).unwrap(), build_freq_maps(&corpus));
}
