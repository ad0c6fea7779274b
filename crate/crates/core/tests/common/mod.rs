//! Oracles shared by the integration suites: central finite differences, a
//! tape-free reference encoder, an independent block-filling simulation and
//! a bag-of-words matching baseline.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod baseline;
pub mod gradcheck;
pub mod reference;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smith_core::corpus::{CLS_ID, NUM_SPECIAL};
use smith_core::encoder::{CombineMode, ModelConfig, SmithModel};
use smith_core::segmenter::{greedy_fill, SegmentedDocument};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// L1=1, L2=1, H=8, A=2, Ls=8, Ld=4 over a 50-word vocabulary.
pub fn toy_config(mode: CombineMode) -> ModelConfig {
    ModelConfig {
        l1: 1,
        l2: 1,
        hidden: 8,
        heads: 2,
        block_len: 8,
        max_blocks: 4,
        vocab_size: 50,
        combine_mode: mode,
        attn_combine_dim: 8,
        dropout: 0.0,
    }
}

pub fn toy_model(mode: CombineMode, seed: u64) -> SmithModel {
    SmithModel::new(toy_config(mode), &mut rng(seed)).unwrap()
}

/// Gives every parameter a random perturbation so that zero-initialized
/// biases and unit gains do not hide wiring mistakes.
pub fn jitter(model: &mut SmithModel, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.params.store.ids().collect();
    for id in ids {
        for v in model.params.store.get_mut(id).data_mut() {
            *v += scale * (r.gen::<f64>() * 2.0 - 1.0);
        }
    }
}

/// Random sentences of the given lengths over non-special ids below `vocab`.
pub fn random_sentences<R: Rng>(lengths: &[usize], vocab: usize, rng: &mut R) -> Vec<Vec<usize>> {
    lengths
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(NUM_SPECIAL..vocab)).collect())
        .collect()
}

pub fn random_document<R: Rng>(
    id: &str,
    lengths: &[usize],
    cfg: &ModelConfig,
    rng: &mut R,
) -> SegmentedDocument {
    let sentences = random_sentences(lengths, cfg.vocab_size, rng);
    greedy_fill(id, &sentences, cfg.block_len, cfg.max_blocks).unwrap()
}

/// Block contents as plain id lists without CLS and PAD, for comparisons.
pub fn block_tokens(doc: &SegmentedDocument) -> Vec<Vec<usize>> {
    doc.blocks[..doc.num_nonempty()]
        .iter()
        .map(|b| {
            assert_eq!(b.token_ids[0], CLS_ID);
            b.token_ids[1..b.real_count].to_vec()
        })
        .collect()
}

/// Block assignment from a literal reading of the filling rules, kept
/// deliberately separate from the library's planner: walk the sentences
/// with an explicit "room left" counter and a list of open blocks.
pub fn reference_fill(lengths: &[usize], ls: usize, ld: usize) -> Vec<Vec<(usize, usize)>> {
    let capacity = ls - 1;
    let mut blocks: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut room = 0usize;
    for (index, &len) in lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let need_new = blocks.is_empty() || len > room;
        if need_new {
            if blocks.len() >= ld {
                break;
            }
            blocks.push(Vec::new());
            room = capacity;
        }
        let taken = if len > capacity { capacity } else { len };
        blocks.last_mut().unwrap().push((index, taken));
        room -= taken;
    }
    blocks
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub const ALL_MODES: [CombineMode; 4] = [
    CombineMode::Normal,
    CombineMode::SumConcat,
    CombineMode::MeanConcat,
    CombineMode::Attention,
];
