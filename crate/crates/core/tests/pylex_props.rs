mod common;

use codesuggest::pylex::{detokenize, tokenize, SourceToken, TokenKind};
use proptest::prelude::*;

fn shape(tokens: &[SourceToken]) -> Vec<(TokenKind, String)> {
    tokens.iter().map(|t| (t.kind, t.text.clone())).collect()
}

fn source(seed: u64, golden: usize) -> String {
    if golden < common::GOLDEN.len() {
        common::GOLDEN[golden].1.to_string()
    } else {
        common::fuzz_file(seed).source
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn render_then_lex_is_a_fixpoint(seed in 0u64..100_000, golden in 0usize..40) {
        let src = source(seed, golden);
        let t = tokenize(&src, true).unwrap();
        let text = detokenize(&t).unwrap();
        let back = tokenize(&text, true).unwrap();
        prop_assert_eq!(shape(&back), shape(&t));
        prop_assert_eq!(detokenize(&back).unwrap(), text);
    }

    #[test]
    fn padding_between_tokens_keeps_the_stream(seed in 0u64..100_000, pads in prop::collection::vec(0usize..4, 64)) {
        let src = common::fuzz_file(seed).source;
        let mut padded = String::new();
        let mut k = 0;
        for line in src.lines() {
            let body = line.trim_start();
            padded.push_str(&line[..line.len() - body.len()]);
            for (j, part) in body.split(' ').enumerate() {
                if j > 0 {
                    padded.push(' ');
                    padded.extend(std::iter::repeat(' ').take(pads[k % pads.len()]));
                    k += 1;
                }
                padded.push_str(part);
            }
            padded.push_str(&" ".repeat(pads[k % pads.len()]));
            padded.push('\n');
        }
        let a = tokenize(&src, false).unwrap();
        let b = tokenize(&padded, false).unwrap();
        prop_assert_eq!(shape(&a), shape(&b));
    }
}
