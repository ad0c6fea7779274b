//! Siamese fine-tuning, pair scoring and classification metrics.
//!
//! Both documents of a pair pass through the same parameters. The cosine of
//! their embeddings is mapped to a match probability by
//! `sigmoid(w * cos + c)` with learnable scalars `w` and `c`.

use log::warn;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{RawDocument, Vocabulary, MASK_ID};
use crate::diffcore::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::encoder::{forward, Bound, DocumentEmbedding, Dropout, SmithModel};
use crate::error::{Result, SmithError};
use crate::pretrain::BatchSampler;
use crate::segmenter::{segment_document, SegmentedDocument};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchExample {
    pub source: SegmentedDocument,
    pub target: SegmentedDocument,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SmithError::shape(
            "cosine",
            format!("dimensions {} and {}", a.len(), b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn pair_similarity(a: &DocumentEmbedding, b: &DocumentEmbedding) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn match_probability(cos: f64, scale: f64, bias: f64) -> f64 {
    sigmoid(scale * cos + bias)
}

/// Mean clamped binary cross-entropy of `sigmoid(scale * cos + bias)`.
pub fn matching_loss(cos: &[f64], labels: &[u8], scale: f64, bias: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let c = tape.constant(Tensor::new(vec![cos.len()], cos.to_vec())?);
    let w = tape.constant(Tensor::scalar(scale));
    let b = tape.constant(Tensor::scalar(bias));
    let logits = tape.scalar_affine(c, w, b)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let loss = tape.binary_cross_entropy(logits, &y)?;
    Ok(tape.value(loss).item())
}

fn check_unmasked(doc: &SegmentedDocument) -> Result<()> {
    if doc.blocks.iter().any(|b| b.token_ids.contains(&MASK_ID)) {
        return Err(SmithError::InvalidInput(format!(
            "document `{}` carries MASK tokens; matching runs on unmasked input",
            doc.doc_id
        )));
    }
    Ok(())
}

pub struct MatchVars {
    /// `[n]` cosine per pair.
    pub cosine: Var,
    /// `[n]` calibrated logits.
    pub logits: Var,
    pub loss: Var,
}

/// Builds the batched Siamese matching loss on `tape`.
pub fn matching_graph(
    tape: &mut Tape,
    b: &Bound,
    batch: &[&MatchExample],
    drop: &mut Dropout,
) -> Result<MatchVars> {
    let n = batch.len();
    let mut docs = Vec::with_capacity(2 * n);
    docs.extend(batch.iter().map(|e| &e.source));
    docs.extend(batch.iter().map(|e| &e.target));
    for d in &docs {
        check_unmasked(d)?;
    }
    let out = forward(tape, b, &docs, drop)?;
    let src = tape.gather_rows(out.embeddings, (0..n).map(Some).collect())?;
    let tgt = tape.gather_rows(out.embeddings, (n..2 * n).map(Some).collect())?;
    let cosine = tape.row_dot(src, tgt)?;
    let layout = b.layout();
    let logits = tape.scalar_affine(cosine, b.var(layout.match_scale), b.var(layout.match_bias))?;
    let labels: Vec<f64> = batch.iter().map(|e| e.label as f64).collect();
    let loss = tape.binary_cross_entropy(logits, &labels)?;
    Ok(MatchVars {
        cosine,
        logits,
        loss,
    })
}

/// One optimizer step on the mean matching loss of `batch`.
pub fn finetune_step<R: Rng>(
    model: &mut SmithModel,
    adam: &mut AdamState,
    batch: &[&MatchExample],
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, grads) = {
        let bound = model.bind(&mut tape);
        let mut drop = Dropout::new(model.config.dropout, rng);
        let vars = matching_graph(&mut tape, &bound, batch, &mut drop)?;
        let loss = tape.value(vars.loss).item();
        let mut g = tape.backward(vars.loss)?;
        (
            loss,
            model.params.store.collect_grads(&bound.params, &mut g),
        )
    };
    adam.step(&mut model.params.store, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

pub fn finetune(
    model: &mut SmithModel,
    examples: &[MatchExample],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(SmithError::InvalidInput("no training pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, &model.params.store);
    let mut sampler = BatchSampler::new(examples.len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size, &mut rng);
        let batch: Vec<&MatchExample> = idx.iter().map(|&i| &examples[i]).collect();
        let loss = finetune_step(model, &mut adam, &batch, &mut rng)?;
        on_step(step, loss);
        history.push(loss);
    }
    Ok(history)
}

/// Match probabilities with dropout off, evaluated in chunks of `chunk` pairs.
pub fn predict(model: &SmithModel, examples: &[MatchExample], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for part in examples.chunks(chunk.max(1)) {
        let mut tape = Tape::inference();
        let bound = model.bind(&mut tape);
        let refs: Vec<&MatchExample> = part.iter().collect();
        let vars = matching_graph(&mut tape, &bound, &refs, &mut Dropout::off())?;
        out.extend(tape.value(vars.logits).data().iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

/// Confusion-matrix metrics, predicting positive when `score >= threshold`.
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalMetrics> {
    if scores.is_empty() {
        return Err(SmithError::InvalidInput("evaluate on an empty set".into()));
    }
    if scores.len() != labels.len() {
        return Err(SmithError::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
        threshold,
    })
}

/// Segments and embeds `docs`. Documents without a single word token are
/// skipped with a warning and reported by id.
pub fn infer_embeddings(
    model: &SmithModel,
    docs: &[RawDocument],
    vocab: &Vocabulary,
    chunk: usize,
) -> Result<(Vec<DocumentEmbedding>, Vec<String>)> {
    let cfg = &model.config;
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for doc in docs {
        let seg = segment_document(doc, vocab, cfg.block_len, cfg.max_blocks)?;
        if seg.blocks.iter().all(|b| b.real_count <= 1) {
            warn!("skipping document `{}`: no tokens to embed", doc.id);
            skipped.push(doc.id.clone());
        } else {
            kept.push(seg);
        }
    }
    let mut out = Vec::with_capacity(kept.len());
    for part in kept.chunks(chunk.max(1)) {
        let refs: Vec<&SegmentedDocument> = part.iter().collect();
        out.extend(model.embed(&refs)?);
    }
    Ok((out, skipped))
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    id: &'a str,
    vector: &'a [f64],
}

pub fn embeddings_to_jsonl(embeddings: &[DocumentEmbedding]) -> String {
    let mut out = String::new();
    for e in embeddings {
        let line = EmbeddingLine {
            id: &e.doc_id,
            vector: &e.vector,
        };
        out.push_str(&serde_json::to_string(&line).expect("embedding serializes"));
        out.push('\n');
    }
    out
}
