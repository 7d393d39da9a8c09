use coach::corpus::bio::{is_well_formed, spans, tags_from_spans};
use coach::corpus::{SlotRegistry, SlotSpan, SlotType};
use coach::embeddings::EmbeddingTable;
use coach::eval::span_f1;
use coach::layers::CoarseSequence;
use coach::model::{extract_spans, CoachModel, CoarseMode, EntityEncoderMode, ModelConfig};
use coach::rng::{stream_rng, Stream};
use proptest::prelude::*;

const SLOTS: [&str; 3] = ["a", "b", "c"];

/// Non-overlapping spans over `n` tokens.
fn arb_spans() -> impl Strategy<Value = (usize, Vec<SlotSpan>)> {
    (1usize..12).prop_flat_map(|n| {
        proptest::collection::vec((0..3usize, 1usize..4, 0..3usize), 0..6).prop_map(move |pieces| {
            let mut t = 0;
            let mut out = Vec::new();
            for (gap, len, slot) in pieces {
                let start = t + gap;
                let end = start + len - 1;
                if end >= n {
                    break;
                }
                out.push(SlotSpan {
                    start,
                    end,
                    slot: SLOTS[slot].to_string(),
                });
                t = end + 1;
            }
            (n, out)
        })
    })
}

fn arb_tags() -> impl Strategy<Value = Vec<String>> {
    arb_spans().prop_map(|(n, s)| tags_from_spans(n, &s))
}

fn model(seed: u64, mode: EntityEncoderMode, coarse: CoarseMode) -> CoachModel {
    let mut reg = SlotRegistry::new();
    for s in SLOTS {
        reg.insert("d", SlotType::new(s, &format!("{s} name"))).unwrap();
    }
    let words = ["x", "y", "z", "name", "a", "b", "c"].map(String::from);
    let table = EmbeddingTable::random(words, 4, 2, 16, &mut stream_rng(seed, Stream::Init)).unwrap();
    let config = ModelConfig {
        hidden: 3,
        layers: 1,
        entity_encoder: mode,
        coarse,
        ..ModelConfig::default()
    };
    CoachModel::new(config, reg, table, seed).unwrap()
}

proptest! {
    #[test]
    fn spans_survive_the_coarse_projection((n, gold) in arb_spans()) {
        let tags = tags_from_spans(n, &gold);
        prop_assert!(is_well_formed(&tags));
        prop_assert_eq!(spans(&tags), gold.clone());
        let (found, repaired) = extract_spans(&CoarseSequence::from_tags(&tags));
        prop_assert_eq!(repaired, 0);
        let bounds: Vec<(usize, usize)> = found.iter().map(|s| (s.start, s.end)).collect();
        let expected: Vec<(usize, usize)> = gold.iter().map(|s| (s.start, s.end)).collect();
        prop_assert_eq!(bounds, expected);
    }

    #[test]
    fn extracted_spans_are_disjoint_and_ordered(codes in proptest::collection::vec(0..3usize, 1..15)) {
        let seq = CoarseSequence(codes.iter().map(|&c| coach::layers::Coarse::from_index(c)).collect());
        let (found, _) = extract_spans(&seq);
        for w in found.windows(2) {
            prop_assert!(w[0].end < w[1].start);
        }
        for s in &found {
            prop_assert!(s.start <= s.end && s.end < seq.len());
        }
    }

    #[test]
    fn f1_ignores_utterance_order(pairs in proptest::collection::vec(arb_tags(), 1..8), rot in 0usize..8) {
        let gold = pairs.clone();
        let pred: Vec<Vec<String>> = pairs.iter().rev().cloned().collect();
        let gold_rev: Vec<Vec<String>> = gold.iter().rev().cloned().collect();
        let k = rot % pred.len();
        let mut p2 = pred.clone();
        let mut g2 = gold_rev.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(span_f1(&pred, &gold_rev).unwrap(), span_f1(&p2, &g2).unwrap());
    }

    #[test]
    fn duplicating_the_corpus_keeps_f1(pred in proptest::collection::vec(arb_tags(), 1..5), seed in 0u64..1000) {
        let gold: Vec<Vec<String>> = pred.iter().enumerate().map(|(i, p)| {
            if (i as u64 + seed).is_multiple_of(2) { p.clone() } else { vec!["O".to_string(); p.len()] }
        }).collect();
        let a = span_f1(&pred, &gold).unwrap();
        let pred2: Vec<_> = pred.iter().chain(&pred).cloned().collect();
        let gold2: Vec<_> = gold.iter().chain(&gold).cloned().collect();
        let b = span_f1(&pred2, &gold2).unwrap();
        prop_assert_eq!(b.counts.gold, 2 * a.counts.gold);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.f1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_are_well_formed(
        seed in 0u64..50,
        words in proptest::collection::vec("[xyz]|oov[0-9]", 1..10),
        mask in 1usize..8,
        mode in 0usize..4,
    ) {
        let m = model(
            seed,
            if mode % 2 == 0 { EntityEncoderMode::Bilstm } else { EntityEncoderMode::Sum },
            if mode < 2 { CoarseMode::Crf } else { CoarseMode::Softmax },
        );
        let slots: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let tags = m.predict_full(&words, &slots).unwrap();
        prop_assert_eq!(tags.len(), words.len());
        prop_assert!(is_well_formed(&tags));
        for s in spans(&tags) {
            prop_assert!(slots.iter().any(|&i| SLOTS[i] == s.slot));
        }
    }
}
