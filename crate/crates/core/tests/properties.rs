//! Lexer and transformation properties over generated inputs.

use looptune::lexer::{join_tokens, tokenize, tokenize_loop, TokenKind};
use looptune::loopir::{parse_nest, parse_region};
use looptune::mutate::{apply, enumerate, TransformationSeq, TransformationStep};
use proptest::prelude::*;

const PIECES: &[&str] = &[
    "for", "while", "int", "double", "unsigned", "x", "a1", "_tmp", "Class", "0", "42", "0x1F", "7u", "10UL", "3.5",
    "1e-3", ".25f", "'a'", "'\\n'", "\"str\"", "\"a\\\"b\"", "+", "++", "+=", "-", "->", "<<=", ">>", "==", "!=", "&&",
    "?", ":", ".", "(", ")", "[", "]", "{", "}", ";", ",", "#", "...", " ", "\n", "\t", "/* c */", "// line\n",
];

fn arb_source() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(PIECES), 0..60).prop_map(|v| v.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tokens_have_known_kinds_and_relex_stably(src in arb_source()) {
        let tokens = tokenize(&src).unwrap();
        for t in &tokens {
            prop_assert!(TokenKind::ALL.contains(&t.kind));
            prop_assert!(!t.text.is_empty());
            prop_assert!(!t.text.chars().any(char::is_whitespace) || t.kind == TokenKind::StringLiteral || t.kind == TokenKind::CharLiteral);
        }
        let again = tokenize(&join_tokens(&tokens)).unwrap();
        prop_assert_eq!(again, tokens);
    }

    #[test]
    fn lexer_never_panics(src in "\\PC{0,80}") {
        let _ = tokenize(&src);
    }
}

/// A loop nest of depth 1 to 3 over arrays `a`, `b`, `c` with affine indices.
fn arb_nest() -> impl Strategy<Value = String> {
    let bound = prop::sample::select(vec!["n", "m", "64", "100", "37"]);
    let offset = prop::sample::select(vec!["", " + 1", " - 1", " + 2"]);
    let array = prop::sample::select(vec!["a", "b", "c"]);
    let stmt = (array.clone(), offset.clone(), array, offset, 0..3usize);
    (1..=3usize, prop::collection::vec(bound, 3), prop::collection::vec(stmt, 1..=3), any::<bool>()).prop_map(
        |(depth, bounds, stmts, guarded)| {
            let vars = ["i", "j", "k"];
            let idx = |off: &str| (0..depth).map(|d| format!("[{}{}]", vars[d], if d == 0 { off } else { "" })).collect::<String>();
            let mut body = String::new();
            for (dst, doff, src, soff, op) in stmts {
                let rhs = match op {
                    0 => format!("{src}{} * 2", idx(soff)),
                    1 => format!("{src}{} + {dst}{}", idx(soff), idx("")),
                    _ => "1".to_string(),
                };
                let line = format!("{dst}{} = {rhs};", idx(doff));
                if guarded {
                    body.push_str(&format!("if ({src}{} > 0) {line} ", idx("")));
                } else {
                    body.push_str(&line);
                    body.push(' ');
                }
            }
            let mut src = format!("{{ {body}}}");
            for d in (0..depth).rev() {
                let v = vars[d];
                src = format!("for ({v} = 0; {v} < {}; {v}++) {src}", bounds[d]);
            }
            src
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumerated_sequences_are_closed_under_the_grammar(src in arb_nest()) {
        let nest = parse_nest(&tokenize_loop("gen", &src).unwrap()).unwrap();
        let all = enumerate(&nest);
        let mut seen = std::collections::HashSet::new();
        for s in &all {
            prop_assert!(s.validate().is_ok());
            prop_assert!(seen.insert(s.to_string()), "duplicate {}", s);
            let identity = TransformationStep::Interchange { perm: 1 };
            prop_assert!(!s.steps.contains(&identity));
            prop_assert_eq!(&s.to_string().parse::<TransformationSeq>().unwrap(), s);
        }
        // Checking a spread-out subset keeps the case count affordable.
        for s in all.iter().step_by(all.len() / 25 + 1) {
            let out = apply(&nest, s).unwrap();
            prop_assert_eq!(&apply(&nest, s).unwrap(), &out);
            prop_assert!(tokenize(&out).is_ok(), "{}: {}", s, out);
            prop_assert!(parse_region(&out).is_ok(), "{}: {}", s, out);
        }
    }
}

#[test]
fn self_limiting_loop_enumerates_nothing() {
    let nest = parse_nest(&tokenize_loop("t", "for (i = 0; i < n; i++) { a[i] = 0; n = n - 1; }").unwrap()).unwrap();
    assert!(enumerate(&nest).is_empty());
}

#[test]
fn depth_two_interchange_is_the_swap() {
    let nest = parse_nest(&tokenize_loop("t", "for (i = 0; i < n; i++) for (j = 0; j < m; j++) c[i][j] = a[j][i];").unwrap()).unwrap();
    let perms: Vec<String> = enumerate(&nest)
        .into_iter()
        .filter(|s| s.steps.len() == 1 && matches!(s.steps[0], TransformationStep::Interchange { .. }))
        .map(|s| s.to_string())
        .collect();
    assert_eq!(perms, ["interchange(perm=2)"]);
    let out = apply(&nest, &"interchange(perm=2)".parse().unwrap()).unwrap();
    assert_eq!(
        tokenize(&out).unwrap(),
        tokenize("for (j = 0; j < m; j++) for (i = 0; i < n; i++) c[i][j] = a[j][i];").unwrap()
    );
}
