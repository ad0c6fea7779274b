//! Greedy sentence filling: packs whole sentences into fixed-capacity blocks.
//!
//! Every block starts with a CLS token, so a block of length `ls` holds at
//! most `ls - 1` sentence tokens. A sentence that does not fit in the space
//! left in the current block opens the next block; a sentence longer than a
//! whole block is cut to its first `ls - 1` tokens. Sentences past the last
//! of `ld` blocks are dropped.

use serde::Serialize;

use crate::corpus::{self, RawDocument, Vocabulary, CLS_ID, PAD_ID};
use crate::error::{Result, SmithError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceBlock {
    pub token_ids: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub real_count: usize,
}

impl SentenceBlock {
    fn empty(ls: usize) -> Self {
        Self {
            token_ids: vec![PAD_ID; ls],
            token_mask: vec![false; ls],
            real_count: 0,
        }
    }

    fn from_tokens(tokens: &[usize], ls: usize) -> Self {
        let mut block = Self::empty(ls);
        block.token_ids[0] = CLS_ID;
        block.token_ids[1..=tokens.len()].copy_from_slice(tokens);
        block.real_count = tokens.len() + 1;
        block.token_mask[..block.real_count].fill(true);
        block
    }

    pub fn is_empty(&self) -> bool {
        self.real_count == 0
    }

    /// PAD slots in a non-empty block; empty blocks report zero.
    pub fn pad_count(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.token_ids.len() - self.real_count
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedDocument {
    pub doc_id: String,
    pub blocks: Vec<SentenceBlock>,
    pub block_mask: Vec<bool>,
}

impl SegmentedDocument {
    pub fn block_len(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.token_ids.len())
    }

    pub fn max_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_nonempty(&self) -> usize {
        self.block_mask.iter().take_while(|&&m| m).count()
    }

    pub fn pad_count(&self) -> usize {
        self.blocks.iter().map(SentenceBlock::pad_count).sum()
    }

    /// Replaces the tokens of block `block`, keeping its mask. Used by the
    /// word-masking pass.
    pub(crate) fn set_token(&mut self, block: usize, offset: usize, id: usize) {
        self.blocks[block].token_ids[offset] = id;
    }

    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            doc_id: &'a str,
            blocks: Vec<&'a [usize]>,
            block_mask: Vec<u8>,
        }
        serde_json::to_string(&Line {
            doc_id: &self.doc_id,
            blocks: self.blocks.iter().map(|b| b.token_ids.as_slice()).collect(),
            block_mask: self.block_mask.iter().map(|&m| m as u8).collect(),
        })
        .expect("segmented document serializes")
    }
}

/// One entry per filled block: `(sentence index, tokens taken)` in document
/// order. A sentence is only ever split by truncation, never across blocks.
pub type FillPlan = Vec<Vec<(usize, usize)>>;

pub fn plan_blocks(lengths: &[usize], ls: usize, ld: usize) -> Result<FillPlan> {
    check_shape(ls, ld)?;
    let capacity = ls - 1;
    let mut plan: FillPlan = Vec::new();
    let mut used = 0;
    for (idx, &len) in lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let fits = plan.last().is_some() && used + len <= capacity;
        if !fits {
            if plan.len() == ld {
                break;
            }
            plan.push(Vec::new());
            used = 0;
        }
        let take = len.min(capacity);
        plan.last_mut()
            .expect("block opened above")
            .push((idx, take));
        used += take;
    }
    Ok(plan)
}

fn check_shape(ls: usize, ld: usize) -> Result<()> {
    if ls < 2 {
        return Err(SmithError::Config(format!(
            "block length must be at least 2, got {ls}"
        )));
    }
    if ld < 1 {
        return Err(SmithError::Config("need at least one block".into()));
    }
    Ok(())
}

pub fn greedy_fill(
    doc_id: &str,
    sentences: &[Vec<usize>],
    ls: usize,
    ld: usize,
) -> Result<SegmentedDocument> {
    let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
    let plan = plan_blocks(&lengths, ls, ld)?;

    let mut blocks = Vec::with_capacity(ld);
    for entries in &plan {
        let tokens: Vec<usize> = entries
            .iter()
            .flat_map(|&(idx, take)| sentences[idx][..take].iter().copied())
            .collect();
        blocks.push(SentenceBlock::from_tokens(&tokens, ls));
    }
    if blocks.is_empty() {
        blocks.push(SentenceBlock::from_tokens(&[], ls));
    }
    let filled = blocks.len();
    blocks.resize_with(ld, || SentenceBlock::empty(ls));
    let block_mask = (0..ld).map(|i| i < filled).collect();
    Ok(SegmentedDocument {
        doc_id: doc_id.to_string(),
        blocks,
        block_mask,
    })
}

pub fn segment_document(
    doc: &RawDocument,
    vocab: &Vocabulary,
    ls: usize,
    ld: usize,
) -> Result<SegmentedDocument> {
    let sentences: Vec<Vec<usize>> = corpus::split_sentences(&doc.text)
        .iter()
        .map(|s| corpus::tokenize(s, vocab))
        .collect();
    greedy_fill(&doc.id, &sentences, ls, ld)
}

/// PAD tokens a one-sentence-per-block split would emit for the sentences
/// that `plan` retained.
pub fn one_per_block_pad_count(lengths: &[usize], plan: &FillPlan, ls: usize) -> usize {
    let capacity = ls - 1;
    plan.iter()
        .flatten()
        .map(|&(idx, _)| capacity - lengths[idx].min(capacity))
        .sum()
}
