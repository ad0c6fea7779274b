mod common;

use common::gradcheck::check_model;
use proptest::prelude::*;
use smith_core::corpus::{RawDocument, Vocabulary};
use smith_core::diffcore::Tape;
use smith_core::encoder::{CombineMode, Dropout, SmithModel};
use smith_core::matcher::{
    cosine, evaluate, infer_embeddings, match_probability, matching_graph, matching_loss, predict,
    MatchExample,
};
use smith_core::segmenter::SegmentedDocument;

fn docs(model: &SmithModel, n: usize, seed: u64) -> Vec<SegmentedDocument> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|i| common::random_document(&format!("d{i}"), &[6, 4, 7, 5], &model.config, &mut r))
        .collect()
}

fn pairs(model: &SmithModel, seed: u64) -> Vec<MatchExample> {
    let d = docs(model, 6, seed);
    (0..3)
        .map(|i| MatchExample {
            source: d[2 * i].clone(),
            target: d[2 * i + 1].clone(),
            label: (i % 2) as u8,
        })
        .collect()
}

fn graph_loss(model: &SmithModel, batch: &[MatchExample]) -> f64 {
    let mut tape = Tape::inference();
    let b = model.bind(&mut tape);
    let refs: Vec<&MatchExample> = batch.iter().collect();
    let v = matching_graph(&mut tape, &b, &refs, &mut Dropout::off()).unwrap();
    tape.value(v.loss).item()
}

#[allow(clippy::approx_constant)]
#[test]
fn hand_values() {
    let l = |c: f64, y: u8| matching_loss(&[c], &[y], 5.0, 0.0).unwrap();
    assert!((l(0.0, 1) - 0.693147).abs() < 1e-6);
    assert!((l(1.0, 1) - 0.006715).abs() < 1e-6);
    assert!((l(1.0, 0) - 5.006715).abs() < 1e-6);
    assert!((cosine(&[3.0, 4.0], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn loss_through_both_towers_matches_finite_differences() {
    for mode in common::ALL_MODES {
        let mut model = common::toy_model(mode, 3);
        common::jitter(&mut model, 0.05, 4);
        let batch = pairs(&model, 5);
        let report = check_model(&model, &|tape, b| {
            let refs: Vec<&MatchExample> = batch.iter().collect();
            matching_graph(tape, b, &refs, &mut Dropout::off())
                .unwrap()
                .loss
        });
        assert!(
            report.max_relative_error <= 1e-4,
            "{mode:?}: {}",
            report.worst
        );
        assert!(
            report.dead.iter().all(|n| n.starts_with("pretrain.")),
            "{:?}",
            report.dead
        );
    }
}

#[test]
fn self_pairs_reach_cosine_one() {
    let model = common::toy_model(CombineMode::MeanConcat, 6);
    let d = docs(&model, 2, 7);
    let same: Vec<MatchExample> = d
        .iter()
        .map(|x| MatchExample {
            source: x.clone(),
            target: x.clone(),
            label: 1,
        })
        .collect();
    let mut tape = Tape::inference();
    let b = model.bind(&mut tape);
    let refs: Vec<&MatchExample> = same.iter().collect();
    let v = matching_graph(&mut tape, &b, &refs, &mut Dropout::off()).unwrap();
    for c in tape.value(v.cosine).data() {
        assert!((c - 1.0).abs() < 1e-12);
    }
    let p = predict(&model, &same, 4).unwrap();
    for x in p {
        assert!((x - match_probability(1.0, 5.0, 0.0)).abs() < 1e-12);
    }
}

#[test]
fn swapping_sides_changes_nothing() {
    for mode in common::ALL_MODES {
        let model = common::toy_model(mode, 8);
        let batch = pairs(&model, 9);
        let swapped: Vec<MatchExample> = batch
            .iter()
            .map(|e| MatchExample {
                source: e.target.clone(),
                target: e.source.clone(),
                label: e.label,
            })
            .collect();
        assert!((graph_loss(&model, &batch) - graph_loss(&model, &swapped)).abs() < 1e-12);
        let a = predict(&model, &batch, 2).unwrap();
        let b = predict(&model, &swapped, 2).unwrap();
        assert!(common::max_abs_diff(&a, &b) < 1e-12);
    }
}

#[test]
fn prediction_agrees_with_single_document_embeddings() {
    let model = common::toy_model(CombineMode::Attention, 10);
    let batch = pairs(&model, 11);
    let p = predict(&model, &batch, 1).unwrap();
    for (e, got) in batch.iter().zip(p) {
        let a = model.forward(&e.source).unwrap().vector;
        let b = model.forward(&e.target).unwrap().vector;
        let want = match_probability(cosine(&a, &b).unwrap(), 5.0, 0.0);
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn masked_input_is_rejected() {
    let model = common::toy_model(CombineMode::Normal, 0);
    let mut batch = pairs(&model, 1);
    batch[0].source.blocks[0].token_ids[1] = smith_core::corpus::MASK_ID;
    assert!(predict(&model, &batch, 4).is_err());
}

#[test]
fn embedding_inference_skips_empty_documents() {
    let vocab = Vocabulary::from_words(["alpha", "beta", "gamma"]).unwrap();
    let mut cfg = common::toy_config(CombineMode::Normal);
    cfg.vocab_size = vocab.len();
    let model = SmithModel::new(cfg, &mut common::rng(0)).unwrap();
    let raw = |id: &str, text: &str| RawDocument {
        id: id.into(),
        text: text.into(),
    };
    let input = vec![
        raw("a", "alpha beta. gamma"),
        raw("empty", ""),
        raw("punct", "... !!! ??"),
        raw("b", "zeta omega."),
        raw("c", "gamma."),
    ];
    let (out, skipped) = infer_embeddings(&model, &input, &vocab, 2).unwrap();
    assert_eq!(skipped, ["empty", "punct"]);
    let ids: Vec<&str> = out.iter().map(|e| e.doc_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    for e in &out {
        assert_eq!(e.vector.len(), model.config.output_dim());
        assert!((common::norm(&e.vector) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn loss_is_monotone_in_cosine(
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
        scale in 0.1f64..20.0,
        bias in -3.0f64..3.0,
    ) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let l = |c: f64, y: u8| matching_loss(&[c], &[y], scale, bias).unwrap();
        prop_assert!(l(hi, 1) <= l(lo, 1));
        prop_assert!(l(hi, 0) >= l(lo, 0));
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(
        v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16),
    ) {
        let a: Vec<f64> = v.iter().map(|p| p.0).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1).collect();
        let ab = cosine(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn threshold_sweep_trades_precision_for_recall(
        scored in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..40),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = scored.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = scored.iter().map(|p| p.1).collect();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = evaluate(&scores, &labels, lo).unwrap();
        let b = evaluate(&scores, &labels, hi).unwrap();
        prop_assert!(b.recall <= a.recall);
        for m in [a, b] {
            for x in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
        let positives = labels.iter().filter(|&&y| y == 1).count();
        if positives > 0 {
            prop_assert_eq!(evaluate(&scores, &labels, 0.0).unwrap().recall, 1.0);
        }
    }
}
