//! Unsupervised pretraining: masked word prediction plus masked
//! sentence-block prediction against in-batch negatives.
//!
//! Block masking is dynamic: the masked positions are re-drawn for every
//! document at every step. The predicted representation of a masked block is
//! the document-level output at its position; its candidates are the
//! pre-masking representations of every block masked in the batch, and the
//! block's own representation is the positive class.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{MASK_ID, NUM_SPECIAL};
use crate::diffcore::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::encoder::{
    document_inputs, encode_document_level, encode_sentence_level, Bound, Dropout, SmithModel,
};
use crate::error::{Result, SmithError};
use crate::segmenter::SegmentedDocument;

pub const DEFAULT_WORD_MASK_RATE: f64 = 0.15;
pub const DEFAULT_BLOCKS_PER_DOC: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Masked word prediction only.
    Wp,
    /// Masked word prediction plus masked sentence-block prediction.
    WpSp,
}

impl std::str::FromStr for LossKind {
    type Err = SmithError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wp" => Ok(LossKind::Wp),
            "wp+sp" => Ok(LossKind::WpSp),
            _ => Err(SmithError::Config(format!(
                "unknown loss `{s}` (expected wp or wp+sp)"
            ))),
        }
    }
}

/// A masked word: position `(doc, block, offset)` and its original id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordTarget {
    pub doc: usize,
    pub block: usize,
    pub offset: usize,
    pub original: usize,
}

#[derive(Debug, Clone)]
pub struct MaskedBatch {
    /// Documents with word masks applied.
    pub docs: Vec<SegmentedDocument>,
    pub word_targets: Vec<WordTarget>,
    /// `(doc, block)` positions replaced by the masked-block vector, grouped
    /// by document in ascending block order.
    pub block_positions: Vec<(usize, usize)>,
}

impl MaskedBatch {
    /// Word targets never sit in a masked block or on CLS/PAD.
    pub fn check_disjoint(&self) -> Result<()> {
        let blocks: HashSet<(usize, usize)> = self.block_positions.iter().copied().collect();
        for t in &self.word_targets {
            let blk = &self.docs[t.doc].blocks[t.block];
            if blocks.contains(&(t.doc, t.block)) || t.offset == 0 || t.offset >= blk.real_count {
                return Err(SmithError::InvalidInput(format!(
                    "word mask at {t:?} overlaps a masked block or a reserved slot"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainLoss {
    #[serde(rename = "L_wp")]
    pub wp: f64,
    #[serde(rename = "L_sp")]
    pub sp: f64,
    pub total: f64,
    /// Fraction of masked blocks whose own representation scores highest
    /// among the in-batch candidates.
    pub sp_accuracy: Option<f64>,
    pub masked_words: usize,
    pub masked_blocks: usize,
}

/// Draws `min(m, filled)` distinct non-empty blocks per document.
pub fn sample_block_positions<R: Rng + ?Sized>(
    filled_counts: &[usize],
    m: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (d, &filled) in filled_counts.iter().enumerate() {
        let k = m.min(filled);
        let mut picked = index::sample(rng, filled, k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|b| (d, b)));
    }
    out
}

/// Selects each real non-CLS token outside `excluded` blocks with
/// probability `rate`; a selected token becomes MASK (80%), a random regular
/// token (10%) or stays unchanged (10%).
pub fn mask_words<R: Rng + ?Sized>(
    docs: &[&SegmentedDocument],
    rate: f64,
    vocab_size: usize,
    excluded: &[(usize, usize)],
    rng: &mut R,
) -> (Vec<SegmentedDocument>, Vec<WordTarget>) {
    let excluded: HashSet<(usize, usize)> = excluded.iter().copied().collect();
    let mut out = Vec::with_capacity(docs.len());
    let mut targets = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut masked = (*doc).clone();
        for b in 0..doc.num_nonempty() {
            if excluded.contains(&(d, b)) {
                continue;
            }
            for offset in 1..doc.blocks[b].real_count {
                if rng.gen::<f64>() >= rate {
                    continue;
                }
                let original = doc.blocks[b].token_ids[offset];
                let roll = rng.gen::<f64>();
                let replacement = if roll < 0.8 {
                    MASK_ID
                } else if roll < 0.9 {
                    rng.gen_range(NUM_SPECIAL..vocab_size)
                } else {
                    original
                };
                masked.set_token(b, offset, replacement);
                targets.push(WordTarget {
                    doc: d,
                    block: b,
                    offset,
                    original,
                });
            }
        }
        out.push(masked);
    }
    (out, targets)
}

pub fn prepare_batch<R: Rng + ?Sized>(
    docs: &[&SegmentedDocument],
    kind: LossKind,
    word_rate: f64,
    blocks_per_doc: usize,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedBatch {
    let block_positions = match kind {
        LossKind::Wp => Vec::new(),
        LossKind::WpSp => {
            let filled: Vec<usize> = docs.iter().map(|d| d.num_nonempty()).collect();
            sample_block_positions(&filled, blocks_per_doc, rng)
        }
    };
    let (docs, word_targets) = mask_words(docs, word_rate, vocab_size, &block_positions, rng);
    MaskedBatch {
        docs,
        word_targets,
        block_positions,
    }
}

/// Tensor-level block masking: replaces `m` randomly chosen non-empty rows
/// of each document in `block_reps` (`[b * Ld, H]`) by `masked_vector`.
pub fn mask_sentence_blocks<R: Rng + ?Sized>(
    block_reps: &Tensor,
    block_mask: &[bool],
    max_blocks: usize,
    m: usize,
    masked_vector: &[f64],
    rng: &mut R,
) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let (rows, h) = block_reps.dims2("mask_sentence_blocks")?;
    if rows % max_blocks != 0 || block_mask.len() != rows || masked_vector.len() != h {
        return Err(SmithError::shape(
            "mask_sentence_blocks",
            format!("[{rows},{h}] reps, {} mask entries", block_mask.len()),
        ));
    }
    let filled: Vec<usize> = block_mask
        .chunks(max_blocks)
        .map(|c| c.iter().take_while(|&&b| b).count())
        .collect();
    let positions = sample_block_positions(&filled, m, rng);
    let mut out = block_reps.clone();
    for &(d, b) in &positions {
        let r = d * max_blocks + b;
        out.data_mut()[r * h..(r + 1) * h].copy_from_slice(masked_vector);
    }
    Ok((out, positions))
}

/// `-(1/B) sum_j log softmax(S_hat h^T)[j, j]`. Zero for an empty batch.
pub fn masked_block_loss(predicted: &Tensor, originals: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let s = tape.constant(predicted.clone());
    let h = tape.constant(originals.clone());
    let loss = block_prediction_loss(&mut tape, s, h)?.0;
    Ok(tape.value(loss).item())
}

/// Returns the loss var and the top-1 retrieval accuracy.
fn block_prediction_loss(tape: &mut Tape, predicted: Var, originals: Var) -> Result<(Var, f64)> {
    let n = tape.value(predicted).shape()[0];
    if tape.value(originals).shape()[0] != n {
        return Err(SmithError::shape(
            "masked_block_loss",
            "predicted and original batches differ",
        ));
    }
    let sim = tape.matmul_nt(predicted, originals)?;
    let targets: Vec<usize> = (0..n).collect();
    let hits = (0..n)
        .filter(|&j| {
            let row = tape.value(sim).row(j);
            row.iter().all(|&v| v <= row[j]) && row.iter().filter(|&&v| v == row[j]).count() == 1
        })
        .count();
    let acc = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Ok((tape.softmax_cross_entropy(sim, &targets)?, acc))
}

pub struct PretrainVars {
    pub wp: Var,
    pub sp: Option<Var>,
    pub total: Var,
    pub sp_accuracy: Option<f64>,
}

/// Builds the joint pretraining loss for a prepared batch on `tape`.
pub fn pretrain_losses(
    tape: &mut Tape,
    b: &Bound,
    batch: &MaskedBatch,
    kind: LossKind,
    drop: &mut Dropout,
) -> Result<PretrainVars> {
    batch.check_disjoint()?;
    let cfg = b.config();
    let docs: Vec<&SegmentedDocument> = batch.docs.iter().collect();
    let sentence = encode_sentence_level(tape, b, &docs, drop)?;

    let rows: Vec<Option<usize>> = batch
        .word_targets
        .iter()
        .map(|t| Some((sentence.doc_rows[t.doc].start + t.block) * cfg.block_len + t.offset))
        .collect();
    let picked = tape.gather_rows(sentence.token_reps, rows)?;
    let logits = tape.matmul_nt(picked, b.var(b.layout().token_embedding))?;
    let logits = tape.add_row_bias(logits, b.var(b.layout().word_bias))?;
    let originals: Vec<usize> = batch.word_targets.iter().map(|t| t.original).collect();
    let wp = tape.softmax_cross_entropy(logits, &originals)?;

    if kind == LossKind::Wp {
        return Ok(PretrainVars {
            wp,
            sp: None,
            total: wp,
            sp_accuracy: None,
        });
    }

    let hat = b.var(b.layout().masked_block);
    let hat = tape.reshape(hat, vec![1, cfg.hidden])?;
    let (inputs, mask) = document_inputs(tape, b, &sentence, &batch.block_positions, Some(hat))?;
    let (context, _) = encode_document_level(tape, b, inputs, &mask, drop)?;
    let predicted = tape.gather_rows(
        context,
        batch
            .block_positions
            .iter()
            .map(|&(d, k)| Some(d * cfg.max_blocks + k))
            .collect(),
    )?;
    let originals = tape.gather_rows(
        sentence.block_reps,
        batch
            .block_positions
            .iter()
            .map(|&(d, k)| Some(sentence.doc_rows[d].start + k))
            .collect(),
    )?;
    let originals = tape.detach(originals);
    let (sp, acc) = block_prediction_loss(tape, predicted, originals)?;
    let total = tape.add(wp, sp)?;
    Ok(PretrainVars {
        wp,
        sp: Some(sp),
        total,
        sp_accuracy: Some(acc),
    })
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub word_mask_rate: f64,
    pub blocks_per_doc: usize,
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            word_mask_rate: DEFAULT_WORD_MASK_RATE,
            blocks_per_doc: DEFAULT_BLOCKS_PER_DOC,
            loss: LossKind::WpSp,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One optimizer step on `docs`. Masks are drawn from `rng`.
pub fn pretrain_step<R: Rng>(
    model: &mut SmithModel,
    adam: &mut AdamState,
    docs: &[&SegmentedDocument],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainLoss> {
    let batch = prepare_batch(
        docs,
        cfg.loss,
        cfg.word_mask_rate,
        cfg.blocks_per_doc,
        model.config.vocab_size,
        rng,
    );
    let mut tape = Tape::new();
    let (loss, grads) = {
        let bound = model.bind(&mut tape);
        let mut drop = Dropout::new(model.config.dropout, rng);
        let vars = pretrain_losses(&mut tape, &bound, &batch, cfg.loss, &mut drop)?;
        let loss = PretrainLoss {
            wp: tape.value(vars.wp).item(),
            sp: vars.sp.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(vars.total).item(),
            sp_accuracy: vars.sp_accuracy,
            masked_words: batch.word_targets.len(),
            masked_blocks: batch.block_positions.len(),
        };
        if !loss.total.is_finite() {
            return Err(SmithError::NonFinite {
                op: "pretrain loss",
            });
        }
        let mut g = tape.backward(vars.total)?;
        (
            loss,
            model.params.store.collect_grads(&bound.params, &mut g),
        )
    };
    adam.step(&mut model.params.store, &grads)?;
    Ok(loss)
}

/// Deterministic batch order: a fresh shuffle of all documents each epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs `cfg.steps` pretraining steps, calling `on_step` after each.
pub fn pretrain(
    model: &mut SmithModel,
    docs: &[SegmentedDocument],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, &PretrainLoss),
) -> Result<Vec<PretrainLoss>> {
    if docs.is_empty() {
        return Err(SmithError::InvalidInput("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, &model.params.store);
    let mut sampler = BatchSampler::new(docs.len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch: Vec<&SegmentedDocument> = idx.iter().map(|&i| &docs[i]).collect();
        let loss = pretrain_step(model, &mut adam, &batch, cfg, &mut rng)?;
        on_step(step, &loss);
        history.push(loss);
    }
    Ok(history)
}
