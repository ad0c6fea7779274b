//! C interface to the document encoder.
//!
//! A model is loaded from a checkpoint and a vocabulary file into an opaque
//! [`SmithHandle`]. Every fallible function returns a [`SmithStatus`]; on
//! failure the message is kept per thread and can be read back with
//! [`smith_last_error_message`]. Output values are written through caller
//! pointers and left untouched on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use smith_core::corpus::{RawDocument, Vocabulary};
use smith_core::encoder::SmithModel;
use smith_core::matcher::{self, cosine};
use smith_core::profiler::{closed_form_budget, ProfileShape};
use smith_core::segmenter::segment_document;
use smith_core::{checkpoint, SmithError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmithStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidInput = 5,
    BufferTooSmall = 6,
    EmptyDocument = 7,
    Numeric = 8,
    Panic = 9,
}

/// Loaded model together with its vocabulary.
pub struct SmithHandle {
    model: SmithModel,
    vocab: Vocabulary,
}

/// Attention score entries for flat and hierarchical encoding of `b`
/// documents of `n` tokens.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SmithAttentionBudget {
    pub flat_entries: u64,
    pub sentence_level_entries: u64,
    pub document_level_entries: u64,
    pub hierarchical_total: u64,
    pub padding_entries: u64,
    pub reduction_factor: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(message: &str) {
    LAST_ERROR.with(|e| {
        let mut buf = e.borrow_mut();
        buf.clear();
        buf.extend(message.bytes().filter(|&b| b != 0));
    });
}

struct Failure(SmithStatus, String);

impl From<SmithError> for Failure {
    fn from(e: SmithError) -> Self {
        let status = match &e {
            SmithError::Io { .. } => SmithStatus::Io,
            SmithError::Checkpoint { .. } => SmithStatus::Checkpoint,
            SmithError::EmptyDocument(_) => SmithStatus::EmptyDocument,
            SmithError::NonFinite { .. } | SmithError::NonFiniteGradient { .. } => {
                SmithStatus::Numeric
            }
            _ => SmithStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SmithStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SmithStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmithStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SmithStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` is null or a NUL-terminated string.
unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        Failure(
            SmithStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

/// # Safety
/// `handle` is null or came from [`smith_model_load`] and was not freed.
unsafe fn handle<'a>(handle: *const SmithHandle) -> Result<&'a SmithHandle, Failure> {
    handle.as_ref().ok_or_else(|| null("handle"))
}

fn embed(h: &SmithHandle, text: &str) -> Result<Vec<f64>, Failure> {
    let cfg = &h.model.config;
    let doc = RawDocument {
        id: "ffi".into(),
        text: text.into(),
    };
    let seg = segment_document(&doc, &h.vocab, cfg.block_len, cfg.max_blocks)?;
    if seg.blocks.iter().all(|b| b.real_count <= 1) {
        return Err(Failure(
            SmithStatus::EmptyDocument,
            "text has no tokens to embed".into(),
        ));
    }
    Ok(h.model.forward(&seg)?.vector)
}

/// Loads a checkpoint and vocabulary. On success `*out` owns a handle that
/// must be released with [`smith_model_free`].
///
/// # Safety
/// Paths are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut SmithHandle,
) -> SmithStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = checkpoint::load(Path::new(text(checkpoint_path, "checkpoint_path")?))?;
        let vocab = Vocabulary::load(Path::new(text(vocab_path, "vocab_path")?))?;
        if vocab.len() != model.config.vocab_size {
            return Err(Failure(
                SmithStatus::InvalidInput,
                format!(
                    "checkpoint expects {} tokens, vocabulary has {}",
                    model.config.vocab_size,
                    vocab.len()
                ),
            ));
        }
        *out = Box::into_raw(Box::new(SmithHandle { model, vocab }));
        Ok(())
    })
}

/// Releases a handle. Null is accepted and ignored.
///
/// # Safety
/// `handle` is null or came from [`smith_model_load`] and was not freed.
#[no_mangle]
pub unsafe extern "C" fn smith_model_free(handle: *mut SmithHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Length of the embeddings produced by the model.
///
/// # Safety
/// `handle` as for [`smith_model_free`]; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_model_output_dim(
    handle: *const SmithHandle,
    out: *mut usize,
) -> SmithStatus {
    guard(|| {
        let h = self::handle(handle)?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.model.config.output_dim();
        Ok(())
    })
}

/// Embeds `text` into `out[0..capacity]`. `*written` receives the embedding
/// length, also when the buffer is too small.
///
/// # Safety
/// `out` points to `capacity` writable doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_embed_text(
    handle: *const SmithHandle,
    text: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> SmithStatus {
    guard(|| {
        let h = self::handle(handle)?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let vector = embed(h, self::text(text, "text")?)?;
        *written = vector.len();
        if capacity < vector.len() {
            return Err(Failure(
                SmithStatus::BufferTooSmall,
                format!(
                    "embedding has {} values, buffer holds {capacity}",
                    vector.len()
                ),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, vector.len()).copy_from_slice(&vector);
        Ok(())
    })
}

/// Match probability of two texts under the model's calibrated cosine.
///
/// # Safety
/// Texts are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_match_probability(
    handle: *const SmithHandle,
    text_a: *const c_char,
    text_b: *const c_char,
    out: *mut f64,
) -> SmithStatus {
    guard(|| {
        let h = self::handle(handle)?;
        let a = embed(h, text(text_a, "text_a")?)?;
        let b = embed(h, text(text_b, "text_b")?)?;
        let scale = h
            .model
            .params
            .get("match.scale")
            .map_or(1.0, |t| t.data()[0]);
        let bias = h
            .model
            .params
            .get("match.bias")
            .map_or(0.0, |t| t.data()[0]);
        let p = matcher::match_probability(cosine(&a, &b)?, scale, bias);
        *out.as_mut().ok_or_else(|| null("out"))? = p;
        Ok(())
    })
}

/// Cosine similarity of two vectors of length `len`.
///
/// # Safety
/// `a` and `b` point to `len` readable doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> SmithStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("vector"));
        }
        let value = cosine(
            std::slice::from_raw_parts(a, len),
            std::slice::from_raw_parts(b, len),
        )?;
        *out.as_mut().ok_or_else(|| null("out"))? = value;
        Ok(())
    })
}

/// Closed-form attention budget for `b` documents of `n` tokens, blocks of
/// `ls` tokens, `a` heads and `l` layers per level.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn smith_attention_budget(
    n: u64,
    ls: u64,
    b: u64,
    a: u64,
    l: u64,
    out: *mut SmithAttentionBudget,
) -> SmithStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let budget = closed_form_budget(ProfileShape { n, ls, b, a, l })?;
        *out = SmithAttentionBudget {
            flat_entries: budget.flat_entries,
            sentence_level_entries: budget.sentence_level_entries,
            document_level_entries: budget.document_level_entries,
            hierarchical_total: budget.hierarchical_total,
            padding_entries: budget.padding_entries,
            reduction_factor: budget.reduction_factor,
        };
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `capacity - 1` bytes. Returns the
/// full message length without the terminator.
///
/// # Safety
/// `buf` is null or points to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn smith_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_codes() {
        let io = SmithError::Io {
            context: "x".into(),
            source: std::io::Error::other("y"),
        };
        assert_eq!(Failure::from(io).0, SmithStatus::Io);
        assert_eq!(
            Failure::from(SmithError::Config("c".into())).0,
            SmithStatus::InvalidInput
        );
        assert_eq!(
            Failure::from(SmithError::NonFinite { op: "gelu" }).0,
            SmithStatus::Numeric
        );
    }

    #[test]
    fn panics_are_contained() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, SmithStatus::Panic);
    }
}
