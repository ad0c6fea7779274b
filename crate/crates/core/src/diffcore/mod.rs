//! Dense `f64` tensors with a reverse-mode tape and an Adam optimizer.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamConfig, AdamState};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{
    AttnShape, Gradients, Tape, Var, L2_NORM_FLOOR, LAYER_NORM_EPS, MASK_SCORE, PROB_CLAMP,
};
pub use tensor::Tensor;

use crate::error::Result;

/// Standalone scaled dot-product attention over plain tensors.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: &[bool],
    shape: AttnShape,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention(q, k, v, key_mask, shape)?;
    Ok(tape.value(out).clone())
}

/// Row-wise L2 normalization of a matrix over plain tensors.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let out = tape.l2_normalize_rows(v)?;
    Ok(tape.value(out).clone())
}
