use std::ops::Range;

use rand::RngCore;

use super::config::{CombineMode, ModelConfig};
use super::params::{DenseIds, LayerIds, Layout, SmithParameters};
use crate::diffcore::{AttnShape, BoundParams, ParamId, Tape, Tensor, Var};
use crate::error::{Result, SmithError};
use crate::segmenter::{SegmentedDocument, SentenceBlock};

/// Sinusoidal encoding of position `pos` over `width` dimensions: even
/// dimensions `sin(pos / 10000^(2i/width))`, odd dimensions the matching cos.
pub fn sinusoid(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let pair = (j / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / width as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `[copies * len, width]` table of positions `0..len`, repeated.
fn tiled_positions(len: usize, width: usize, copies: usize) -> Tensor {
    let one: Vec<f64> = (0..len).flat_map(|p| sinusoid(p, width)).collect();
    let data = one.repeat(copies);
    Tensor::new(vec![copies * len, width], data).expect("tiled shape")
}

/// Inverted dropout driven by an explicit generator; `Dropout::off()` is the
/// evaluation mode.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: &'r mut dyn RngCore) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEmbedding {
    pub doc_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmithModel {
    pub config: ModelConfig,
    pub params: SmithParameters,
    layout: Layout,
}

/// A model whose parameters have been placed on a tape.
pub struct Bound<'m> {
    pub model: &'m SmithModel,
    pub params: BoundParams,
}

impl Bound<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    pub fn layout(&self) -> &Layout {
        &self.model.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

/// Sentence-level outputs for a batch. Only non-empty blocks are encoded;
/// document `d` owns rows `doc_rows[d]` of `block_reps`, in block order.
pub struct SentenceOutputs {
    pub token_reps: Var,
    pub block_reps: Var,
    pub doc_rows: Vec<Range<usize>>,
}

pub struct ForwardOutputs {
    pub sentence: SentenceOutputs,
    /// `[docs * Ld, H]` document-level contextual block representations.
    pub context: Var,
    pub doc_reps: Var,
    /// `[docs, output_dim]` final unit-norm vectors.
    pub embeddings: Var,
}

impl SmithModel {
    pub fn new<R: RngCore>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = SmithParameters::init(&config, rng)?;
        Self::from_parameters(config, params)
    }

    /// Checks that `params` has exactly the names and shapes `config` needs.
    pub fn from_parameters(config: ModelConfig, params: SmithParameters) -> Result<Self> {
        config.validate()?;
        let expected = SmithParameters::expected_shapes(&config)?;
        if expected.len() != params.store.len() {
            return Err(SmithError::InvalidInput(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.store.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| SmithError::InvalidInput(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(SmithError::InvalidInput(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = params.layout(&config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        Bound {
            model: self,
            params: self.params.store.bind(tape),
        }
    }

    pub fn check_document(&self, doc: &SegmentedDocument) -> Result<()> {
        let cfg = &self.config;
        if doc.block_len() != cfg.block_len || doc.max_blocks() != cfg.max_blocks {
            return Err(SmithError::InvalidInput(format!(
                "document `{}` segmented as Ls={} Ld={}, model expects Ls={} Ld={}",
                doc.doc_id,
                doc.block_len(),
                doc.max_blocks(),
                cfg.block_len,
                cfg.max_blocks
            )));
        }
        let filled = doc.num_nonempty();
        if filled == 0 {
            return Err(SmithError::EmptyDocument(doc.doc_id.clone()));
        }
        if doc.block_mask[filled..].iter().any(|&m| m) {
            return Err(SmithError::InvalidInput(format!(
                "document `{}` block mask is not a prefix of ones",
                doc.doc_id
            )));
        }
        if doc.blocks[..filled].iter().any(SentenceBlock::is_empty) {
            return Err(SmithError::InvalidInput(format!(
                "document `{}` marks an empty block as filled",
                doc.doc_id
            )));
        }
        Ok(())
    }

    /// Embeds one document with dropout off.
    pub fn forward(&self, doc: &SegmentedDocument) -> Result<DocumentEmbedding> {
        Ok(self.embed(&[doc])?.remove(0))
    }

    /// Embeds a batch of documents with dropout off.
    pub fn embed(&self, docs: &[&SegmentedDocument]) -> Result<Vec<DocumentEmbedding>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let out = forward(&mut tape, &bound, docs, &mut Dropout::off())?;
        let emb = tape.value(out.embeddings);
        Ok(docs
            .iter()
            .enumerate()
            .map(|(i, d)| DocumentEmbedding {
                doc_id: d.doc_id.clone(),
                vector: emb.row(i).to_vec(),
            })
            .collect())
    }
}

fn dense(tape: &mut Tape, b: &Bound, ids: DenseIds, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(ids.w))?;
    tape.add_row_bias(y, b.var(ids.b))
}

/// Post-norm Transformer layer: `y = LN(x + MHA(x))`, `LN(y + FFN(y))` with a
/// GELU feed-forward of width 4H. Attention runs independently in each of
/// `groups` contiguous runs of `group_len` rows.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    tape: &mut Tape,
    b: &Bound,
    layer: &LayerIds,
    x: Var,
    key_mask: &[bool],
    groups: usize,
    group_len: usize,
    drop: &mut Dropout,
) -> Result<Var> {
    let heads = b.config().heads;
    let q = tape.matmul(x, b.var(layer.q_w))?;
    let q = tape.add_row_bias(q, b.var(layer.q_b))?;
    let k = tape.matmul(x, b.var(layer.k_w))?;
    let k = tape.add_row_bias(k, b.var(layer.k_b))?;
    let v = tape.matmul(x, b.var(layer.v_w))?;
    let v = tape.add_row_bias(v, b.var(layer.v_b))?;
    let shape = AttnShape::self_attention(groups, group_len, heads);
    let a = tape.attention(q, k, v, key_mask, shape)?;
    let a = tape.matmul(a, b.var(layer.out_w))?;
    let a = tape.add_row_bias(a, b.var(layer.out_b))?;
    let a = drop.apply(tape, a)?;
    let y = tape.add(x, a)?;
    let y = tape.layer_norm(y, b.var(layer.attn_gamma), b.var(layer.attn_beta))?;

    let f = tape.matmul(y, b.var(layer.ffn_in_w))?;
    let f = tape.add_row_bias(f, b.var(layer.ffn_in_b))?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, b.var(layer.ffn_out_w))?;
    let f = tape.add_row_bias(f, b.var(layer.ffn_out_b))?;
    let f = drop.apply(tape, f)?;
    let out = tape.add(y, f)?;
    tape.layer_norm(out, b.var(layer.ffn_gamma), b.var(layer.ffn_beta))
}

/// Token embedding plus sinusoidal token position, `[blocks * Ls, H]`.
pub fn embed_tokens(tape: &mut Tape, b: &Bound, blocks: &[&SentenceBlock]) -> Result<Var> {
    let cfg = b.config();
    let ids: Vec<usize> = blocks
        .iter()
        .flat_map(|blk| blk.token_ids.iter().copied())
        .collect();
    let emb = tape.embedding(b.var(b.layout().token_embedding), &ids)?;
    let pos = tape.constant(tiled_positions(cfg.block_len, cfg.hidden, blocks.len()));
    tape.add(emb, pos)
}

/// Runs the sentence-level stack over `blocks`. Returns token
/// representations `[blocks * Ls, H]` and L2-normalized CLS projections
/// `[blocks, H]` (block positions not yet added).
pub fn encode_sentence_blocks(
    tape: &mut Tape,
    b: &Bound,
    blocks: &[&SentenceBlock],
    drop: &mut Dropout,
) -> Result<(Var, Var)> {
    let ls = b.config().block_len;
    let mask: Vec<bool> = blocks
        .iter()
        .flat_map(|blk| blk.token_mask.iter().copied())
        .collect();
    let mut x = embed_tokens(tape, b, blocks)?;
    x = drop.apply(tape, x)?;
    for layer in &b.layout().sentence_layers {
        x = transformer_layer(tape, b, layer, x, &mask, blocks.len(), ls, drop)?;
    }
    let cls = tape.gather_rows(x, (0..blocks.len()).map(|i| Some(i * ls)).collect())?;
    let proj = dense(tape, b, b.layout().block_proj, cls)?;
    let reps = tape.l2_normalize_rows(proj)?;
    Ok((x, reps))
}

pub fn encode_sentence_level(
    tape: &mut Tape,
    b: &Bound,
    docs: &[&SegmentedDocument],
    drop: &mut Dropout,
) -> Result<SentenceOutputs> {
    let mut blocks = Vec::new();
    let mut doc_rows = Vec::with_capacity(docs.len());
    for doc in docs {
        b.model.check_document(doc)?;
        let start = blocks.len();
        blocks.extend(doc.blocks[..doc.num_nonempty()].iter());
        doc_rows.push(start..blocks.len());
    }
    let (token_reps, block_reps) = encode_sentence_blocks(tape, b, &blocks, drop)?;
    Ok(SentenceOutputs {
        token_reps,
        block_reps,
        doc_rows,
    })
}

/// Lays block representations out as `[docs * Ld, H]`, zero rows for empty
/// blocks. Positions listed in `masked` take the row of `replacement`
/// (`[1, H]`) instead. Also returns the document-level key mask.
pub fn document_inputs(
    tape: &mut Tape,
    b: &Bound,
    sentence: &SentenceOutputs,
    masked: &[(usize, usize)],
    replacement: Option<Var>,
) -> Result<(Var, Vec<bool>)> {
    let ld = b.config().max_blocks;
    let rows = tape.value(sentence.block_reps).shape()[0];
    let (source, subst_row) = match replacement {
        Some(r) if !masked.is_empty() => (tape.concat_rows(sentence.block_reps, r)?, Some(rows)),
        _ if masked.is_empty() => (sentence.block_reps, None),
        _ => {
            return Err(SmithError::InvalidInput(
                "masked block positions without a replacement vector".into(),
            ))
        }
    };
    let mut index = Vec::with_capacity(sentence.doc_rows.len() * ld);
    let mut mask = Vec::with_capacity(index.capacity());
    for (d, range) in sentence.doc_rows.iter().enumerate() {
        for i in 0..ld {
            let filled = i < range.len();
            mask.push(filled);
            index.push(if !filled {
                None
            } else if masked.contains(&(d, i)) {
                subst_row
            } else {
                Some(range.start + i)
            });
        }
    }
    Ok((tape.gather_rows(source, index)?, mask))
}

/// Adds block positions and runs the document-level stack. Returns the
/// contextual block representations and the L2-normalized projection of
/// each document's first one.
pub fn encode_document_level(
    tape: &mut Tape,
    b: &Bound,
    inputs: Var,
    block_mask: &[bool],
    drop: &mut Dropout,
) -> Result<(Var, Var)> {
    let (h, ld) = (b.config().hidden, b.config().max_blocks);
    let rows = tape.value(inputs).shape()[0];
    if !rows.is_multiple_of(ld) {
        return Err(SmithError::shape(
            "encode_document_level",
            format!("{rows} rows is not a multiple of Ld={ld}"),
        ));
    }
    let docs = rows / ld;
    for d in 0..docs {
        if !block_mask[d * ld] {
            return Err(SmithError::EmptyDocument(format!("batch entry {d}")));
        }
    }
    let pos = tape.constant(tiled_positions(ld, h, docs));
    let mut x = tape.add(inputs, pos)?;
    x = drop.apply(tape, x)?;
    for layer in &b.layout().document_layers {
        x = transformer_layer(tape, b, layer, x, block_mask, docs, ld, drop)?;
    }
    let first = tape.gather_rows(x, (0..docs).map(|d| Some(d * ld)).collect())?;
    let proj = dense(tape, b, b.layout().doc_proj, first)?;
    let doc_reps = tape.l2_normalize_rows(proj)?;
    Ok((x, doc_reps))
}

/// Fuses block representations `h_i` with document representations
/// according to the configured mode, then L2-normalizes the result.
pub fn combine_representations(
    tape: &mut Tape,
    b: &Bound,
    block_reps: Var,
    doc_rows: &[Range<usize>],
    doc_reps: Var,
) -> Result<Var> {
    let n_blocks = tape.value(block_reps).shape()[0];
    let pool = |weight: &dyn Fn(&Range<usize>) -> f64| {
        let mut data = vec![0.0; doc_rows.len() * n_blocks];
        for (d, r) in doc_rows.iter().enumerate() {
            for i in r.clone() {
                data[d * n_blocks + i] = weight(r);
            }
        }
        Tensor::new(vec![doc_rows.len(), n_blocks], data).expect("pool shape")
    };
    let pooled = match b.config().combine_mode {
        CombineMode::Normal => None,
        CombineMode::SumConcat => {
            let p = tape.constant(pool(&|_| 1.0));
            Some(tape.matmul(p, block_reps)?)
        }
        CombineMode::MeanConcat => {
            let p = tape.constant(pool(&|r| 1.0 / r.len() as f64));
            Some(tape.matmul(p, block_reps)?)
        }
        CombineMode::Attention => {
            let (w, v) = b
                .layout()
                .combine
                .ok_or_else(|| SmithError::Config("attention combine parameters missing".into()))?;
            let proj = tape.matmul(block_reps, b.var(w))?;
            let dim = tape.value(b.var(v)).len();
            let v_col = tape.reshape(b.var(v), vec![dim, 1])?;
            let logits = tape.matmul(proj, v_col)?;
            let weights = tape.segment_softmax(logits, doc_rows.to_vec())?;
            let weighted = tape.mul_rows(block_reps, weights)?;
            let p = tape.constant(pool(&|_| 1.0));
            Some(tape.matmul(p, weighted)?)
        }
    };
    let combined = match pooled {
        Some(p) => tape.concat_cols(p, doc_reps)?,
        None => doc_reps,
    };
    tape.l2_normalize_rows(combined)
}

/// Full hierarchical forward pass over a batch of documents.
pub fn forward(
    tape: &mut Tape,
    b: &Bound,
    docs: &[&SegmentedDocument],
    drop: &mut Dropout,
) -> Result<ForwardOutputs> {
    let sentence = encode_sentence_level(tape, b, docs, drop)?;
    let (inputs, mask) = document_inputs(tape, b, &sentence, &[], None)?;
    let (context, doc_reps) = encode_document_level(tape, b, inputs, &mask, drop)?;
    let embeddings =
        combine_representations(tape, b, sentence.block_reps, &sentence.doc_rows, doc_reps)?;
    Ok(ForwardOutputs {
        sentence,
        context,
        doc_reps,
        embeddings,
    })
}
