//! Checkpoint files: a UTF-8 manifest followed by a little-endian `f32`
//! payload.
//!
//! ```text
//! smith-checkpoint 1
//! [config]
//! L1=6
//! ...
//! [params]
//! embeddings.token 30522x256 0
//! ...
//! [blob] 123456
//! <raw bytes>
//! ```
//!
//! Each parameter line gives the name, the shape joined by `x` and the byte
//! offset of its first value. Values are stored as `f32`, so a model
//! quantized with [`ParamStore::quantize_f32`] round-trips bit-identically.
//!
//! [`ParamStore::quantize_f32`]: crate::diffcore::ParamStore::quantize_f32

use std::collections::HashMap;
use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};
use crate::encoder::{ModelConfig, SmithModel, SmithParameters};
use crate::error::{Result, SmithError};

const MAGIC: &str = "smith-checkpoint 1";

/// Serializes the model configuration and parameters.
pub fn encode(model: &SmithModel) -> Vec<u8> {
    let mut head = format!(
        "{MAGIC}\n[config]\n{}[params]\n",
        model.config.to_key_values()
    );
    let mut blob = Vec::with_capacity(model.params.store.num_values() * 4);
    for (name, t) in model.params.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("{name} {} {}\n", shape.join("x"), blob.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    head.push_str(&format!("[blob] {}\n", blob.len()));
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn save(model: &SmithModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(model))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<SmithModel> {
    let fail = |detail: String| SmithError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("manifest ends before the blob marker".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| fail("manifest is not UTF-8".into()))
    };

    if next_line()? != MAGIC {
        return Err(fail("not a checkpoint (bad header)".into()));
    }
    if next_line()? != "[config]" {
        return Err(fail("missing [config] section".into()));
    }
    let mut config_text = String::new();
    loop {
        let line = next_line()?;
        if line == "[params]" {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let config = ModelConfig::parse_key_values(&config_text).map_err(|e| fail(e.to_string()))?;

    let mut entries = Vec::new();
    let blob_len = loop {
        let line = next_line()?;
        if let Some(n) = line.strip_prefix("[blob] ") {
            break n
                .parse::<usize>()
                .map_err(|_| fail(format!("bad blob length `{n}`")))?;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(fail(format!("malformed parameter line `{line}`")));
        };
        let shape = shape
            .split('x')
            .filter(|s| !s.is_empty())
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fail(format!("parameter `{name}`: bad shape `{shape}`")))?;
        let offset = offset
            .parse::<usize>()
            .map_err(|_| fail(format!("parameter `{name}`: bad offset `{offset}`")))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset,
        });
    };
    let blob = &bytes[pos..];
    if blob.len() < blob_len {
        return Err(fail(format!(
            "truncated blob: manifest declares {blob_len} bytes, file holds {}",
            blob.len()
        )));
    }
    if blob.len() > blob_len {
        return Err(fail(format!(
            "{} trailing bytes after the declared blob",
            blob.len() - blob_len
        )));
    }

    let expected: HashMap<String, Vec<usize>> = SmithParameters::expected_shapes(&config)?
        .into_iter()
        .collect();
    let mut store = ParamStore::new();
    let mut cursor = 0;
    for e in entries {
        let want = expected.get(&e.name).ok_or_else(|| {
            fail(format!(
                "unknown parameter `{}` for this configuration",
                e.name
            ))
        })?;
        if *want != e.shape {
            return Err(fail(format!(
                "parameter `{}` has shape {:?}, configuration requires {want:?}",
                e.name, e.shape
            )));
        }
        if e.offset != cursor {
            return Err(fail(format!(
                "parameter `{}` starts at byte {}, expected {cursor}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = cursor + 4 * n;
        if end > blob_len {
            return Err(fail(format!(
                "parameter `{}` runs past the end of the blob",
                e.name
            )));
        }
        let data: Vec<f64> = blob[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail(format!(
                "parameter `{}` holds non-finite values",
                e.name
            )));
        }
        store
            .add(e.name.clone(), Tensor::new(e.shape, data)?)
            .map_err(|_| fail(format!("parameter `{}` listed twice", e.name)))?;
        cursor = end;
    }
    if cursor != blob_len {
        return Err(fail(format!(
            "parameters cover {cursor} of {blob_len} blob bytes"
        )));
    }
    if let Some(missing) = expected.keys().find(|n| store.id(n).is_none()) {
        return Err(fail(format!("missing parameter `{missing}`")));
    }
    SmithModel::from_parameters(config, SmithParameters { store }).map_err(|e| fail(e.to_string()))
}

pub fn load(path: &Path) -> Result<SmithModel> {
    let bytes = std::fs::read(path)
        .map_err(|e| SmithError::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes, path)
}

/// Copies every parameter of `source` into `model` by name. Returns the
/// names `model` has no slot for; a name present in both with different
/// shapes is an error.
pub fn initialize_from(model: &mut SmithModel, source: &SmithModel) -> Result<Vec<String>> {
    let mut unused = Vec::new();
    for (name, t) in source.params.store.iter() {
        match model.params.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
            Some(slot) => {
                return Err(SmithError::InvalidInput(format!(
                    "initial parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => unused.push(name.to_string()),
        }
    }
    Ok(unused)
}
