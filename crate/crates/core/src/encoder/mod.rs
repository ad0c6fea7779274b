//! Hierarchical encoder: sentence-level Transformers over each block, a
//! document-level Transformer over block representations, and the fusion of
//! both into one unit-norm document vector.

mod config;
mod model;
mod params;

pub use config::{CombineMode, ModelConfig};
pub use model::{
    combine_representations, document_inputs, embed_tokens, encode_document_level,
    encode_sentence_blocks, encode_sentence_level, forward, sinusoid, transformer_layer, Bound,
    DocumentEmbedding, Dropout, ForwardOutputs, SentenceOutputs, SmithModel,
};
pub use params::{
    DenseIds, LayerIds, Layout, SmithParameters, EMBED_SCALE, MASKED_BLOCK_STD, MATCH_SCALE_INIT,
};
