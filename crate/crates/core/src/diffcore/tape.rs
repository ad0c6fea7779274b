//! Reverse-mode tape. Every op appends a node holding its output value and
//! whatever the backward rule needs; `backward` walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because an
//! op can only reference nodes that already exist.

use std::ops::Range;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Result, SmithError};

/// Additive score applied to masked keys before the softmax.
pub const MASK_SCORE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const L2_NORM_FLOOR: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched attention call: queries are `[batch * q_len, H]`,
/// keys and values `[batch * k_len, H]`, each batch entry attending only to
/// its own keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn self_attention(batch: usize, len: usize, heads: usize) -> Self {
        Self {
            batch,
            q_len: len,
            k_len: len,
            heads,
        }
    }

    /// Score-matrix entries (`QK^T` elements over all heads).
    pub fn score_entries(&self) -> u64 {
        (self.batch * self.heads * self.q_len * self.k_len) as u64
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    MulRows(Var, Var),
    SegmentSoftmax {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    ScalarAffine {
        x: Var,
        w: Var,
        c: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BinaryCrossEntropy {
        logits: Var,
        labels: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    score_entries: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`]. Only vars that
/// require grad and lie on a path to the loss have an entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,m] += a[n,k] * b[m,k]^T
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += dot(arow, brow);
        }
    }
}

/// out[k,m] += a[n,k]^T * b[n,m]
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_segments(op: &'static str, segments: &[Range<usize>], n: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.end < s.start {
            return Err(SmithError::shape(
                op,
                "segments must tile the rows in order",
            ));
        }
        next = s.end;
    }
    if next != n {
        return Err(SmithError::shape(
            op,
            format!("segments cover {next} of {n} rows"),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            score_entries: 0,
        }
    }

    /// A tape that records values only; nothing it produces requires grad.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attention score-matrix entries computed on this tape so far.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(SmithError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(SmithError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `x[n,m] + bias[m]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("add_row_bias")?;
        if self.value(bias).len() != m {
            return Err(SmithError::shape(
                "add_row_bias",
                format!("bias of length {} for {m} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push("add_row_bias", out, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(SmithError::shape(
                "matmul",
                format!("[{n},{k}] x [{k2},{m}]"),
            ));
        }
        let mut data = vec![0.0; n * m];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut data,
            n,
            k,
            m,
        );
        let out = Tensor::new(vec![n, m], data)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[n,k] * b[m,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul_nt")?;
        let (m, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(SmithError::shape(
                "matmul_nt",
                format!("[{n},{k}] x [{m},{k2}]^T"),
            ));
        }
        let mut data = vec![0.0; n * m];
        matmul_nt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut data,
            n,
            k,
            m,
        );
        let out = Tensor::new(vec![n, m], data)?;
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Normalizes each row of `x[n,m]`, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(SmithError::shape("layer_norm", "gamma/beta width"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                data[i * m + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention,
    /// `softmax(QK^T / sqrt(d) + M) V` per head, with `d = H / heads` and `M`
    /// adding [`MASK_SCORE`] at keys whose `key_mask` entry is false.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        shape: AttnShape,
    ) -> Result<Var> {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = shape;
        let (qr, h) = self.value(q).dims2("attention")?;
        let (kr, hk) = self.value(k).dims2("attention")?;
        let (vr, hv) = self.value(v).dims2("attention")?;
        if qr != batch * q_len || kr != batch * k_len || vr != kr || hk != h || hv != h {
            return Err(SmithError::shape(
                "attention",
                format!("Q [{qr},{h}] K [{kr},{hk}] V [{vr},{hv}] for {shape:?}"),
            ));
        }
        if key_mask.len() != kr {
            return Err(SmithError::shape(
                "attention",
                format!("key mask of length {} for {kr} keys", key_mask.len()),
            ));
        }
        if heads == 0 || h % heads != 0 {
            return Err(SmithError::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        for g in 0..batch {
            if !key_mask[g * k_len..(g + 1) * k_len].iter().any(|&m| m) {
                return Err(SmithError::DegenerateAttention { group: g });
            }
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let keep_probs = self.grad_enabled;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; qr * h];
        let mut probs = if keep_probs {
            vec![0.0; batch * heads * q_len * k_len]
        } else {
            Vec::new()
        };
        let mut p = vec![0.0; k_len];
        for g in 0..batch {
            for hd in 0..heads {
                let cols = hd * d..(hd + 1) * d;
                for i in 0..q_len {
                    let qrow = &qd[(g * q_len + i) * h..][cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(g * k_len + j) * h..][cols.clone()];
                        let mut s = dot(qrow, krow) * scale;
                        if !key_mask[g * k_len + j] {
                            s += MASK_SCORE;
                        }
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        total += *pj;
                    }
                    let orow = &mut out[(g * q_len + i) * h..][cols.clone()];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj /= total;
                        let vrow = &vd[(g * k_len + j) * h..][cols.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += *pj * vv;
                        }
                    }
                    if keep_probs {
                        let base = ((g * heads + hd) * q_len + i) * k_len;
                        probs[base..base + k_len].copy_from_slice(&p);
                    }
                }
            }
        }
        self.score_entries += shape.score_entries();
        let out = Tensor::new(vec![qr, h], out)?;
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Picks rows of `x[r,m]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (r, m) = self.value(x).dims2("gather_rows")?;
        let mut data = vec![0.0; index.len() * m];
        for (i, idx) in index.iter().enumerate() {
            if let Some(src) = *idx {
                if src >= r {
                    return Err(SmithError::shape(
                        "gather_rows",
                        format!("row {src} of {r}"),
                    ));
                }
                data[i * m..(i + 1) * m].copy_from_slice(self.value(x).row(src));
            }
        }
        let out = Tensor::new(vec![index.len(), m], data)?;
        self.push("gather_rows", out, Op::GatherRows { x, index }, &[x])
    }

    /// Embedding lookup: row `ids[i]` of `table`. The backward pass only
    /// touches the looked-up rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab_size, _) = self.value(table).dims2("embedding")?;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(SmithError::TokenOutOfRange { id, vocab_size });
        }
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ma) = self.value(a).dims2("concat_rows")?;
        let (rb, mb) = self.value(b).dims2("concat_rows")?;
        if ma != mb {
            return Err(SmithError::shape(
                "concat_rows",
                format!("{ma} vs {mb} columns"),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ra + rb, ma], data)?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ma) = self.value(a).dims2("concat_cols")?;
        let (nb, mb) = self.value(b).dims2("concat_cols")?;
        if na != nb {
            return Err(SmithError::shape(
                "concat_cols",
                format!("{na} vs {nb} rows"),
            ));
        }
        let mut data = Vec::with_capacity(na * (ma + mb));
        for i in 0..na {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(vec![na, ma + mb], data)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Divides each row by `max(||row||, 1e-12)`; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = self.value(x).row(i);
            let norm = dot(row, row).sqrt().max(L2_NORM_FLOOR);
            norms.push(norm);
            for (o, v) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(
            "l2_normalize_rows",
            out,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Row-wise dot products of `a[n,m]` and `b[n,m]`, shape `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (n, _) = self.value(a).dims2("row_dot")?;
        let data = (0..n)
            .map(|i| dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let out = Tensor::new(vec![n], data)?;
        self.push("row_dot", out, Op::RowDot(a, b), &[a, b])
    }

    /// Scales row `i` of `x[n,m]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("mul_rows")?;
        if self.value(w).len() != n {
            return Err(SmithError::shape("mul_rows", "one weight per row"));
        }
        let wd = self.value(w).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &wi) in data.chunks_mut(m.max(1)).zip(wd) {
            for v in row {
                *v *= wi;
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push("mul_rows", out, Op::MulRows(x, w), &[x, w])
    }

    /// Softmax over each contiguous segment of a vector.
    pub fn segment_softmax(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let n = self.value(x).len();
        check_segments("segment_softmax", &segments, n)?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; n];
        for s in &segments {
            if s.is_empty() {
                continue;
            }
            let max = xd[s.clone()]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in s.clone() {
                data[i] = (xd[i] - max).exp();
                total += data[i];
            }
            for v in &mut data[s.clone()] {
                *v /= total;
            }
        }
        let out = Tensor::new(vec![n], data)?;
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax { x, segments },
            &[x],
        )
    }

    /// `w * x + c` with scalar `w` and `c`.
    pub fn scalar_affine(&mut self, x: Var, w: Var, c: Var) -> Result<Var> {
        if !self.value(w).is_scalar() || !self.value(c).is_scalar() {
            return Err(SmithError::shape(
                "scalar_affine",
                "w and c must be scalars",
            ));
        }
        let (wv, cv) = (self.value(w).item(), self.value(c).item());
        let v = self.value(x);
        let data = v.data().iter().map(|a| wv * a + cv).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(
            "scalar_affine",
            out,
            Op::ScalarAffine { x, w, c },
            &[x, w, c],
        )
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`. An empty
    /// batch gives a loss of zero.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(SmithError::shape(
                "softmax_cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(SmithError::shape(
                "softmax_cross_entropy",
                format!("target {t} of {c} classes"),
            ));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = self.value(logits).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                total += e;
            }
            for pj in &mut probs[i * c..(i + 1) * c] {
                *pj /= total;
            }
            loss += total.ln() + max - row[targets[i]];
        }
        if n > 0 {
            loss /= n as f64;
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]` before the log.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() || z.is_empty() {
            return Err(SmithError::shape(
                "binary_cross_entropy",
                format!("{} logits for {} labels", z.len(), labels.len()),
            ));
        }
        let mut loss = 0.0;
        for (&zi, &y) in z.iter().zip(labels) {
            let p = sigmoid(zi).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        loss /= z.len() as f64;
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Inverted dropout with keep probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(SmithError::Config(format!("dropout rate {rate} >= 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Accumulates `d loss / d var` for every var that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(SmithError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(var) {
            return;
        }
        let len = self.value(var).len();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    });
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                });
                let m = self.value(*bias).len();
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [n, k] = va.shape()[..] else {
                    unreachable!()
                };
                let m = vb.shape()[1];
                self.accumulate(grads, *a, |d| matmul_nt_into(g, vb.data(), d, n, m, k));
                self.accumulate(grads, *b, |d| matmul_tn_into(va.data(), g, d, n, k, m));
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [n, k] = va.shape()[..] else {
                    unreachable!()
                };
                let m = vb.shape()[0];
                self.accumulate(grads, *a, |d| matmul_into(g, vb.data(), d, n, m, k));
                self.accumulate(grads, *b, |d| matmul_tn_into(g, va.data(), d, n, m, k));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(vx) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let m = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                self.accumulate(grads, *x, |d| {
                    let mut dxhat = vec![0.0; m];
                    for (i, r) in rstd.iter().enumerate() {
                        let rows = i * m..(i + 1) * m;
                        let (gr, xr) = (&g[rows.clone()], &xhat[rows.clone()]);
                        for j in 0..m {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dot(&dxhat, xr) / m as f64;
                        for (j, dj) in d[rows].iter_mut().enumerate() {
                            *dj += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |d| {
                    for (gr, xr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for gr in g.chunks(m) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::GatherRows { x, index } => {
                let m = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |d| {
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(src) = *idx {
                            let gr = &g[i * m..(i + 1) * m];
                            d[src * m..(src + 1) * m]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(&g[..na]).for_each(|(d, g)| *d += g);
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(&g[na..]).for_each(|(d, g)| *d += g);
                });
            }
            Op::ConcatCols(a, b) => {
                let ma = self.value(*a).shape()[1];
                let mb = self.value(*b).shape()[1];
                let w = ma + mb;
                self.accumulate(grads, *a, |d| {
                    for (dr, gr) in d.chunks_mut(ma.max(1)).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[..ma]).for_each(|(d, g)| *d += g);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (dr, gr) in d.chunks_mut(mb.max(1)).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[ma..]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let m = node.value.shape()[1];
                let raw = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for (i, &norm) in norms.iter().enumerate() {
                        let rows = i * m..(i + 1) * m;
                        let (gr, yr) = (&g[rows.clone()], &y[rows.clone()]);
                        let true_norm = dot(&raw[rows.clone()], &raw[rows.clone()]).sqrt();
                        if true_norm > L2_NORM_FLOOR {
                            let proj = dot(yr, gr);
                            for (j, dj) in d[rows].iter_mut().enumerate() {
                                *dj += (gr[j] - yr[j] * proj) / norm;
                            }
                        } else {
                            for (j, dj) in d[rows].iter_mut().enumerate() {
                                *dj += gr[j] / norm;
                            }
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let m = va.shape()[1];
                self.accumulate(grads, *a, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..m {
                            d[i * m + j] += gi * vb.data()[i * m + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..m {
                            d[i * m + j] += gi * va.data()[i * m + j];
                        }
                    }
                });
            }
            Op::MulRows(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let m = vx.shape()[1];
                self.accumulate(grads, *x, |d| {
                    for (i, wi) in vw.data().iter().enumerate() {
                        for j in 0..m {
                            d[i * m + j] += g[i * m + j] * wi;
                        }
                    }
                });
                self.accumulate(grads, *w, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += dot(&g[i * m..(i + 1) * m], vx.row(i));
                    }
                });
            }
            Op::SegmentSoftmax { x, segments } => {
                let p = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for s in segments {
                        let inner = dot(&p[s.clone()], &g[s.clone()]);
                        for i in s.clone() {
                            d[i] += p[i] * (g[i] - inner);
                        }
                    }
                });
            }
            Op::ScalarAffine { x, w, c } => {
                let wv = self.value(*w).item();
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += wv * g);
                });
                self.accumulate(grads, *w, |d| d[0] += dot(g, vx));
                self.accumulate(grads, *c, |d| d[0] += g.iter().sum::<f64>());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accumulate(grads, *logits, |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::BinaryCrossEntropy { logits, labels } => {
                let z = self.value(*logits).data();
                let scale = g[0] / z.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for ((d, &zi), &y) in d.iter_mut().zip(z).zip(labels) {
                        let p = sigmoid(zi);
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            *d += scale * (p - y);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = shape;
        let h = self.value(q).shape()[1];
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; k_len];
        for b in 0..batch {
            for hd in 0..heads {
                let cols = hd * d..(hd + 1) * d;
                for i in 0..q_len {
                    let base = ((b * heads + hd) * q_len + i) * k_len;
                    let p = &probs[base..base + k_len];
                    let qi = (b * q_len + i) * h;
                    let go = &g[qi..][cols.clone()];
                    let mut inner = 0.0;
                    for (j, dsj) in ds.iter_mut().enumerate() {
                        let vj = (b * k_len + j) * h;
                        let dp = dot(go, &vd[vj..][cols.clone()]);
                        *dsj = dp;
                        inner += p[j] * dp;
                    }
                    for (j, dsj) in ds.iter_mut().enumerate() {
                        *dsj = p[j] * (*dsj - inner) * scale;
                    }
                    for j in 0..k_len {
                        let kj = (b * k_len + j) * h;
                        let (pj, dsj) = (p[j], ds[j]);
                        for c in cols.clone() {
                            dq[qi + c] += dsj * kd[kj + c];
                            dk[kj + c] += dsj * qd[qi + c];
                            dv[kj + c] += pj * g[qi + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate(grads, var, |dst| {
                dst.iter_mut().zip(&delta).for_each(|(d, x)| *d += x);
            });
        }
    }
}
