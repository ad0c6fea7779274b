//! Straight-line evaluation of the encoder from named parameters, using
//! nested loops over plain vectors and no tape.

use smith_core::diffcore::Tensor;
use smith_core::encoder::{CombineMode, SmithModel};
use smith_core::segmenter::{SegmentedDocument, SentenceBlock};

pub type Rows = Vec<Vec<f64>>;

fn param<'a>(model: &'a SmithModel, name: &str) -> &'a Tensor {
    model
        .params
        .get(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
}

fn affine(x: &Rows, model: &SmithModel, prefix: &str) -> Rows {
    let w = param(model, &format!("{prefix}.weight"));
    let b = param(model, &format!("{prefix}.bias"));
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| {
                    let mut s = b.data()[o];
                    for i in 0..inp {
                        s += row[i] * w.data()[i * out + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(row: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + 1e-12).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, x)| (x - mean) / denom * gamma.data()[j] + beta.data()[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

pub fn position(pos: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for i in 0..width.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf((2 * i) as f64 / width as f64);
        out[2 * i] = (pos as f64 * freq).sin();
        if 2 * i + 1 < width {
            out[2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

/// One post-norm layer over a single sequence; `mask[j]` false hides key `j`.
pub fn layer(model: &SmithModel, prefix: &str, x: &Rows, mask: &[bool]) -> Rows {
    let heads = model.config.heads;
    let h = x[0].len();
    let d = h / heads;
    let q = affine(x, model, &format!("{prefix}.attn.query"));
    let k = affine(x, model, &format!("{prefix}.attn.key"));
    let v = affine(x, model, &format!("{prefix}.attn.value"));
    let n = x.len();
    let mut attended = vec![vec![0.0; h]; n];
    for head in 0..heads {
        let lo = head * d;
        for i in 0..n {
            let mut scores = Vec::with_capacity(n);
            for j in 0..n {
                let mut s = 0.0;
                for c in lo..lo + d {
                    s += q[i][c] * k[j][c];
                }
                s /= (d as f64).sqrt();
                if !mask[j] {
                    s -= 1e9;
                }
                scores.push(s);
            }
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..n {
                for c in lo..lo + d {
                    attended[i][c] += exps[j] / total * v[j][c];
                }
            }
        }
    }
    let projected = affine(&attended, model, &format!("{prefix}.attn.output"));
    let g1 = param(model, &format!("{prefix}.attn.norm.gamma"));
    let b1 = param(model, &format!("{prefix}.attn.norm.beta"));
    let y: Rows = (0..n)
        .map(|i| {
            let sum: Vec<f64> = (0..h).map(|c| x[i][c] + projected[i][c]).collect();
            layer_norm(&sum, g1, b1)
        })
        .collect();
    let inner: Rows = affine(&y, model, &format!("{prefix}.ffn.input"))
        .into_iter()
        .map(|row| row.into_iter().map(gelu).collect())
        .collect();
    let f = affine(&inner, model, &format!("{prefix}.ffn.output"));
    let g2 = param(model, &format!("{prefix}.ffn.norm.gamma"));
    let b2 = param(model, &format!("{prefix}.ffn.norm.beta"));
    (0..n)
        .map(|i| {
            let sum: Vec<f64> = (0..h).map(|c| y[i][c] + f[i][c]).collect();
            layer_norm(&sum, g2, b2)
        })
        .collect()
}

/// Token rows after the sentence-level stack, and the unit block vector.
pub fn block(model: &SmithModel, blk: &SentenceBlock) -> (Rows, Vec<f64>) {
    let h = model.config.hidden;
    let table = param(model, "embeddings.token");
    let mut x: Rows = blk
        .token_ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let p = position(pos, h);
            (0..h).map(|c| table.data()[id * h + c] + p[c]).collect()
        })
        .collect();
    for i in 0..model.config.l1 {
        x = layer(model, &format!("sentence.layer{i}"), &x, &blk.token_mask);
    }
    let proj = affine(&vec![x[0].clone()], model, "sentence.projection");
    let rep = unit(&proj[0]);
    (x, rep)
}

/// Contextual block rows and the unit document vector for the given block
/// vectors (one per filled block).
pub fn document(model: &SmithModel, reps: &[Vec<f64>]) -> (Rows, Vec<f64>) {
    let (h, ld) = (model.config.hidden, model.config.max_blocks);
    let mask: Vec<bool> = (0..ld).map(|i| i < reps.len()).collect();
    let mut x: Rows = (0..ld)
        .map(|i| {
            let p = position(i, h);
            (0..h)
                .map(|c| reps.get(i).map_or(0.0, |r| r[c]) + p[c])
                .collect()
        })
        .collect();
    for i in 0..model.config.l2 {
        x = layer(model, &format!("document.layer{i}"), &x, &mask);
    }
    let proj = affine(&vec![x[0].clone()], model, "document.projection");
    let doc = unit(&proj[0]);
    (x, doc)
}

pub fn combine(model: &SmithModel, reps: &[Vec<f64>], doc: &[f64]) -> Vec<f64> {
    let h = model.config.hidden;
    let pooled: Option<Vec<f64>> = match model.config.combine_mode {
        CombineMode::Normal => None,
        CombineMode::SumConcat => Some((0..h).map(|c| reps.iter().map(|r| r[c]).sum()).collect()),
        CombineMode::MeanConcat => Some(
            (0..h)
                .map(|c| reps.iter().map(|r| r[c]).sum::<f64>() / reps.len() as f64)
                .collect(),
        ),
        CombineMode::Attention => {
            let w = param(model, "combine.weight");
            let v = param(model, "combine.vector");
            let width = v.len();
            let logits: Vec<f64> = reps
                .iter()
                .map(|r| {
                    (0..width)
                        .map(|o| {
                            let hw: f64 = (0..h).map(|c| r[c] * w.data()[c * width + o]).sum();
                            hw * v.data()[o]
                        })
                        .sum()
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = exps.iter().sum();
            Some(
                (0..h)
                    .map(|c| reps.iter().zip(&exps).map(|(r, e)| r[c] * e / total).sum())
                    .collect(),
            )
        }
    };
    match pooled {
        Some(mut p) => {
            p.extend_from_slice(doc);
            unit(&p)
        }
        None => unit(doc),
    }
}

pub fn embedding(model: &SmithModel, doc: &SegmentedDocument) -> Vec<f64> {
    let reps: Vec<Vec<f64>> = doc.blocks[..doc.num_nonempty()]
        .iter()
        .map(|b| block(model, b).1)
        .collect();
    let (_, d) = document(model, &reps);
    combine(model, &reps, &d)
}
