//! Randomized invariant checks for the text, scoring, and graph layers.

use proptest::prelude::*;
use std::collections::HashMap;

use prefix_bridge::corpus::{preprocess_report, Vocabulary, BOS_ID, EOS_ID, RESERVED};
use prefix_bridge::graph::Graph;
use prefix_bridge::metrics::corpus_bleu;
use prefix_bridge::store::{AdamHyper, ParameterStore};
use prefix_bridge::Tensor;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn sentence(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max_words).prop_map(|w| w.join(" "))
}

/// Reference BLEU that re-derives clipping per pair without sharing any code
/// with the production path.
fn bleu_oracle(pairs: &[(String, String)]) -> ([f64; 4], f64) {
    let mut numer = [0usize; 4];
    let mut denom = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refr) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = refr.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let mut hc: HashMap<&[&str], usize> = HashMap::new();
            for w in h.windows(n) {
                *hc.entry(w).or_insert(0) += 1;
            }
            for (gram, count) in hc {
                let mut in_ref = 0;
                for w in r.windows(n) {
                    if w == gram {
                        in_ref += 1;
                    }
                }
                numer[n - 1] += count.min(in_ref);
                denom[n - 1] += count;
            }
        }
    }
    let mut p = [0.0f64; 4];
    for n in 0..4 {
        if denom[n] > 0 {
            p[n] = numer[n] as f64 / denom[n] as f64;
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    (p, bp)
}

proptest! {
    #[test]
    fn preprocess_is_idempotent(raw in "[ -~]{1,80}") {
        if let Ok(once) = preprocess_report(&raw) {
            let twice = preprocess_report(&once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn preprocess_output_alphabet(raw in "[ -~]{1,80}") {
        if let Ok(clean) = preprocess_report(&raw) {
            prop_assert!(clean
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '.'));
            prop_assert!(!clean.contains("  "));
            prop_assert_eq!(clean.trim(), &clean);
        }
    }

    #[test]
    fn encode_decode_round_trips(words in prop::collection::vec(word(), 1..12)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(&[text.clone()], 1).unwrap();
        let ids = vocab.encode(&text);
        prop_assert_eq!(ids[0], BOS_ID);
        prop_assert_eq!(*ids.last().unwrap(), EOS_ID);
        prop_assert!(ids[1..ids.len() - 1].iter().all(|&i| i >= RESERVED));
        prop_assert_eq!(vocab.decode(&ids), text);
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..6,
        vals in prop::collection::vec(-8.0f32..8.0, 25),
    ) {
        let data: Vec<f32> = (0..rows * cols).map(|i| vals[i % vals.len()]).collect();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let out = g.value(s);
        for r in 0..rows {
            let sum: f64 = out.data[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariant(
        cols in 1usize..6,
        vals in prop::collection::vec(-8.0f32..8.0, 6),
        shift in -50.0f32..50.0,
    ) {
        let base: Vec<f32> = vals[..cols].to_vec();
        let shifted: Vec<f32> = base.iter().map(|v| v + shift).collect();
        let mut g = Graph::new();
        let a = g.constant(&Tensor::new(vec![1, cols], base).unwrap()).unwrap();
        let b = g.constant(&Tensor::new(vec![1, cols], shifted).unwrap()).unwrap();
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        let (va, vb) = (g.value(sa), g.value(sb));
        for c in 0..cols {
            prop_assert!((va.data[c] - vb.data[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn bleu_matches_bruteforce_oracle(
        pairs in prop::collection::vec((sentence(8), sentence(8)), 1..=5),
    ) {
        let report = corpus_bleu(&pairs).unwrap();
        let (p, bp) = bleu_oracle(&pairs);
        prop_assert_eq!(report.precisions, p);
        prop_assert_eq!(report.brevity_penalty, bp);
    }

    #[test]
    fn bleu_invariant_under_reordering(
        mut pairs in prop::collection::vec((sentence(6), sentence(6)), 2..=5),
    ) {
        let a = corpus_bleu(&pairs).unwrap();
        pairs.reverse();
        let b = corpus_bleu(&pairs).unwrap();
        prop_assert_eq!(a.bleu, b.bleu);
        prop_assert_eq!(a.precisions, b.precisions);
    }

    #[test]
    fn adam_never_touches_frozen(
        vals in prop::collection::vec(-1.0f32..1.0, 4),
        grads in prop::collection::vec(-1.0f32..1.0, 4),
    ) {
        let mut store = ParameterStore::new();
        store.insert("lm.w", Tensor::new(vec![2, 2], vals.clone()).unwrap());
        store.insert("mapper.w", Tensor::new(vec![2, 2], vals.clone()).unwrap());
        store.set_frozen(vec!["lm.".to_string()]);
        store.accumulate_grad("lm.w", &grads).unwrap();
        store.accumulate_grad("mapper.w", &grads).unwrap();
        store.adam_step(&AdamHyper::default()).unwrap();
        let frozen = store.get("lm.w").unwrap();
        for (a, b) in frozen.data.iter().zip(&vals) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
