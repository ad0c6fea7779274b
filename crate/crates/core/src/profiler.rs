//! Attention-memory accounting for flat versus hierarchical encoding.
//!
//! For `b` documents of `N` tokens, `A` heads and `L` layers per level:
//!
//! * flat: `b * A * N^2 * L` score entries,
//! * sentence level: `b * A * Ls^2 * (N / Ls) * L`,
//! * document level: `b * A * (N / Ls)^2 * L`.
//!
//! When `Ls` does not divide `N` the last block is padded to `Ls` slots and
//! the entries attributable to padding are reported separately. Every
//! budget is checked against counts tallied from real forward passes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CLS_ID, NUM_SPECIAL, PAD_ID};
use crate::diffcore::Tape;
use crate::encoder::{
    document_inputs, encode_document_level, encode_sentence_level, CombineMode, Dropout,
    ModelConfig, SmithModel,
};
use crate::error::{Result, SmithError};
use crate::segmenter::{SegmentedDocument, SentenceBlock};

/// Bytes per stored score entry (`f32`).
pub const BYTES_PER_ENTRY: u64 = 4;

/// Instrumented passes larger than this many flat entries run with `b = 1`
/// and `L = 1`; the closed forms are then checked at that reduced shape.
pub const INSTRUMENT_LIMIT: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProfileShape {
    pub n: u64,
    pub ls: u64,
    pub b: u64,
    pub a: u64,
    pub l: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EntryCounts {
    pub flat: u64,
    pub sentence_level: u64,
    pub document_level: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Instrumented {
    /// Batch size and layer count the forward passes actually ran with.
    pub b: u64,
    pub l: u64,
    pub counts: EntryCounts,
    pub matches_closed_form: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionBudget {
    pub shape: ProfileShape,
    pub n_blocks: u64,
    pub flat_entries: u64,
    pub sentence_level_entries: u64,
    pub document_level_entries: u64,
    pub hierarchical_total: u64,
    /// Sentence-level entries involving the PAD slots of a partial last block.
    pub padding_entries: u64,
    pub reduction_factor: f64,
    pub flat_bytes: u64,
    pub hierarchical_bytes: u64,
    pub instrumented: Option<Instrumented>,
}

impl ProfileShape {
    pub fn validate(&self) -> Result<()> {
        if [self.b, self.a, self.l].contains(&0) || self.ls < 2 || self.n < 2 {
            return Err(SmithError::Config(
                "b, A and L must be positive, N and Ls at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> u64 {
        self.n.div_ceil(self.ls)
    }

    pub fn closed_form(&self) -> EntryCounts {
        let bal = self.b * self.a * self.l;
        let nb = self.n_blocks();
        EntryCounts {
            flat: bal * self.n * self.n,
            sentence_level: bal * self.ls * self.ls * nb,
            document_level: bal * nb * nb,
        }
    }

    pub fn padding_entries(&self) -> u64 {
        let r = self.n % self.ls;
        if r == 0 {
            0
        } else {
            self.b * self.a * self.l * (self.ls * self.ls - r * r)
        }
    }

    /// The combined hierarchical form `(Ls * N + N^2 / Ls^2) * b * A * L`,
    /// defined when `Ls` divides `N`.
    pub fn combined_form(&self) -> Option<u64> {
        self.n.is_multiple_of(self.ls).then(|| {
            (self.ls * self.n + self.n * self.n / (self.ls * self.ls)) * self.b * self.a * self.l
        })
    }
}

pub fn closed_form_budget(shape: ProfileShape) -> Result<AttentionBudget> {
    shape.validate()?;
    let c = shape.closed_form();
    let total = c.sentence_level + c.document_level;
    Ok(AttentionBudget {
        shape,
        n_blocks: shape.n_blocks(),
        flat_entries: c.flat,
        sentence_level_entries: c.sentence_level,
        document_level_entries: c.document_level,
        hierarchical_total: total,
        padding_entries: shape.padding_entries(),
        reduction_factor: c.flat as f64 / total as f64,
        flat_bytes: c.flat * BYTES_PER_ENTRY,
        hierarchical_bytes: total * BYTES_PER_ENTRY,
        instrumented: None,
    })
}

/// Closed-form budget plus instrumented counts; errors if they disagree.
pub fn count_attention_entries(shape: ProfileShape) -> Result<AttentionBudget> {
    let mut budget = closed_form_budget(shape)?;
    let run_shape = if budget.flat_entries > INSTRUMENT_LIMIT {
        ProfileShape {
            b: 1,
            l: 1,
            ..shape
        }
    } else {
        shape
    };
    let counts = instrument(run_shape)?;
    let matches = counts == run_shape.closed_form();
    budget.instrumented = Some(Instrumented {
        b: run_shape.b,
        l: run_shape.l,
        counts,
        matches_closed_form: matches,
    });
    if !matches {
        return Err(SmithError::InvalidInput(format!(
            "instrumented counts {counts:?} differ from closed form {:?}",
            run_shape.closed_form()
        )));
    }
    Ok(budget)
}

fn probe_model(shape: ProfileShape, block_len: usize, max_blocks: usize) -> Result<SmithModel> {
    let cfg = ModelConfig {
        l1: shape.l as usize,
        l2: shape.l as usize,
        hidden: 2 * shape.a as usize,
        heads: shape.a as usize,
        block_len,
        max_blocks,
        vocab_size: NUM_SPECIAL + 4,
        combine_mode: CombineMode::Normal,
        attn_combine_dim: 2 * shape.a as usize,
        dropout: 0.0,
    };
    SmithModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Documents of `n` token slots laid out as full blocks of `ls` slots and a
/// padded last block.
fn probe_documents(b: usize, n: usize, ls: usize) -> Vec<SegmentedDocument> {
    let nb = n.div_ceil(ls);
    let doc = |d: usize| {
        let blocks = (0..nb)
            .map(|i| {
                let real = (n - i * ls).min(ls);
                let mut ids = vec![PAD_ID; ls];
                ids[0] = CLS_ID;
                for (j, slot) in ids.iter_mut().enumerate().take(real).skip(1) {
                    *slot = NUM_SPECIAL + (i + j) % 4;
                }
                SentenceBlock {
                    token_ids: ids,
                    token_mask: (0..ls).map(|j| j < real).collect(),
                    real_count: real,
                }
            })
            .collect();
        SegmentedDocument {
            doc_id: format!("probe{d}"),
            blocks,
            block_mask: vec![true; nb],
        }
    };
    (0..b).map(doc).collect()
}

/// Tallies score entries from a flat pass (one `N`-slot block per document)
/// and a hierarchical pass.
pub fn instrument(shape: ProfileShape) -> Result<EntryCounts> {
    shape.validate()?;
    let (b, n, ls) = (shape.b as usize, shape.n as usize, shape.ls as usize);
    let nb = n.div_ceil(ls);

    let flat_model = probe_model(shape, n, 1)?;
    let flat_docs = probe_documents(b, n, n);
    let mut tape = Tape::inference();
    let bound = flat_model.bind(&mut tape);
    let refs: Vec<&SegmentedDocument> = flat_docs.iter().collect();
    encode_sentence_level(&mut tape, &bound, &refs, &mut Dropout::off())?;
    let flat = tape.score_entries();

    let model = probe_model(shape, ls, nb)?;
    let docs = probe_documents(b, n, ls);
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let refs: Vec<&SegmentedDocument> = docs.iter().collect();
    let sentence = encode_sentence_level(&mut tape, &bound, &refs, &mut Dropout::off())?;
    let sentence_level = tape.score_entries();
    let (inputs, mask) = document_inputs(&mut tape, &bound, &sentence, &[], None)?;
    encode_document_level(&mut tape, &bound, inputs, &mask, &mut Dropout::off())?;
    let document_level = tape.score_entries() - sentence_level;

    Ok(EntryCounts {
        flat,
        sentence_level,
        document_level,
    })
}
