//! Hierarchical (sentence-block then document level) Transformer encoder for
//! long-form document matching.
//!
//! The pipeline is: [`corpus`] turns text into token ids, [`segmenter`]
//! packs sentences into fixed-size blocks, [`encoder`] maps a segmented
//! document to a unit-norm embedding, [`pretrain`] and [`matcher`] train it,
//! and [`profiler`] accounts for attention memory.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod fixture;
mod io;
pub mod matcher;
pub mod pretrain;
pub mod profiler;
pub mod segmenter;

pub use error::{Result, SmithError};
