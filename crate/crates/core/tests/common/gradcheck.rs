use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smith_core::diffcore::{AttnShape, Tape, Tensor, Var};
use smith_core::encoder::{Bound, SmithModel};

use super::rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> smith_core::Result<Var> + 'a;

/// Reduces a non-scalar output to `sum(out * w)` with fixed random weights.
fn scalarize(tape: &mut Tape, out: Var) -> Var {
    if tape.value(out).len() == 1 && tape.value(out).is_scalar() {
        return out;
    }
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(shape.iter().product::<usize>() as u64 + 17);
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn evaluate(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalarize(&mut tape, out);
    tape.value(loss).item()
}

/// Largest relative error between tape gradients and central differences
/// over every element of every input.
pub fn check_op(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalarize(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.len()];
        let analytic = grads.get(vars[i]).unwrap_or(&zeros).to_vec();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8))
}

/// Every differentiable tape operation on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (n, k, m) = dims(&mut r);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, build: &Build<'_>| {
        out.push((name, check_op(&inputs, build)));
    };

    run(
        "add",
        vec![randn(&[n, m], &mut r), randn(&[n, m], &mut r)],
        &|t, v| t.add(v[0], v[1]),
    );
    run(
        "add_row_bias",
        vec![randn(&[n, m], &mut r), randn(&[m], &mut r)],
        &|t, v| t.add_row_bias(v[0], v[1]),
    );
    run(
        "mul",
        vec![randn(&[n, m], &mut r), randn(&[n, m], &mut r)],
        &|t, v| t.mul(v[0], v[1]),
    );
    run("scale", vec![randn(&[n, m], &mut r)], &|t, v| {
        t.scale(v[0], -1.7)
    });
    run("sum", vec![randn(&[n, m], &mut r)], &|t, v| t.sum(v[0]));
    run("reshape", vec![randn(&[n, m], &mut r)], &|t, v| {
        t.reshape(v[0], vec![m, n])
    });
    run(
        "matmul",
        vec![randn(&[n, k], &mut r), randn(&[k, m], &mut r)],
        &|t, v| t.matmul(v[0], v[1]),
    );
    run(
        "matmul_nt",
        vec![randn(&[n, k], &mut r), randn(&[m, k], &mut r)],
        &|t, v| t.matmul_nt(v[0], v[1]),
    );
    run("gelu", vec![randn(&[n, m], &mut r)], &|t, v| t.gelu(v[0]));
    let width = m.max(2);
    run(
        "layer_norm",
        vec![
            randn(&[n, width], &mut r),
            randn(&[width], &mut r),
            randn(&[width], &mut r),
        ],
        &|t, v| t.layer_norm(v[0], v[1], v[2]),
    );

    let (batch, len, heads, d) = (
        r.gen_range(1..=3),
        r.gen_range(2..=6),
        2,
        r.gen_range(1..=3),
    );
    let h = heads * d;
    let mut mask: Vec<bool> = (0..batch * len).map(|_| r.gen_bool(0.7)).collect();
    for g in 0..batch {
        mask[g * len] = true;
    }
    let qkv = vec![
        randn(&[batch * len, h], &mut r),
        randn(&[batch * len, h], &mut r),
        randn(&[batch * len, h], &mut r),
    ];
    run("attention", qkv, &move |t, v| {
        t.attention(
            v[0],
            v[1],
            v[2],
            &mask,
            AttnShape::self_attention(batch, len, heads),
        )
    });

    let index: Vec<Option<usize>> = (0..n + 2)
        .map(|i| (i % 3 != 1).then(|| (i * 5) % n))
        .collect();
    run("gather_rows", vec![randn(&[n, m], &mut r)], &move |t, v| {
        t.gather_rows(v[0], index.clone())
    });
    let ids: Vec<usize> = (0..k + 3).map(|_| r.gen_range(0..n)).collect();
    run("embedding", vec![randn(&[n, m], &mut r)], &move |t, v| {
        t.embedding(v[0], &ids)
    });
    run(
        "concat_rows",
        vec![randn(&[n, m], &mut r), randn(&[k, m], &mut r)],
        &|t, v| t.concat_rows(v[0], v[1]),
    );
    run(
        "concat_cols",
        vec![randn(&[n, m], &mut r), randn(&[n, k], &mut r)],
        &|t, v| t.concat_cols(v[0], v[1]),
    );
    run(
        "l2_normalize_rows",
        vec![randn(&[n, m], &mut r)],
        &|t, v| t.l2_normalize_rows(v[0]),
    );
    run(
        "row_dot",
        vec![randn(&[n, m], &mut r), randn(&[n, m], &mut r)],
        &|t, v| t.row_dot(v[0], v[1]),
    );
    run(
        "mul_rows",
        vec![randn(&[n, m], &mut r), randn(&[n], &mut r)],
        &|t, v| t.mul_rows(v[0], v[1]),
    );
    let len = n + k;
    let cut = r.gen_range(0..=len);
    run(
        "segment_softmax",
        vec![randn(&[len], &mut r)],
        &move |t, v| t.segment_softmax(v[0], vec![0..cut, cut..len]),
    );
    run(
        "scalar_affine",
        vec![
            randn(&[n], &mut r),
            randn(&[1], &mut r),
            randn(&[1], &mut r),
        ],
        &|t, v| t.scalar_affine(v[0], v[1], v[2]),
    );
    let classes = m.max(2);
    let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    run(
        "softmax_cross_entropy",
        vec![randn(&[n, classes], &mut r)],
        &move |t, v| t.softmax_cross_entropy(v[0], &targets),
    );
    let labels: Vec<f64> = (0..n)
        .map(|_| f64::from(u8::from(r.gen_bool(0.5))))
        .collect();
    run(
        "binary_cross_entropy",
        vec![randn(&[n], &mut r)],
        &move |t, v| t.binary_cross_entropy(v[0], &labels),
    );
    run("dropout", vec![randn(&[n, m], &mut r)], &move |t, v| {
        t.dropout(v[0], 0.3, &mut rng(seed + 99))
    });
    out
}

pub struct ModelReport {
    pub max_relative_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Parameters whose analytic gradient is identically zero.
    pub dead: Vec<String>,
}

type ModelLoss<'a> = dyn Fn(&mut Tape, &Bound) -> Var + 'a;

fn model_loss(model: &SmithModel, loss: &ModelLoss<'_>) -> f64 {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let l = loss(&mut tape, &bound);
    tape.value(l).item()
}

/// Compares tape gradients of `loss` with central differences for every
/// value of every parameter of `model`.
pub fn check_model(model: &SmithModel, loss: &ModelLoss<'_>) -> ModelReport {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = loss(&mut tape, &bound);
    let mut grads = tape.backward(l).unwrap();
    let analytic = model.params.store.collect_grads(&bound.params, &mut grads);

    let mut work = model.clone();
    let mut report = ModelReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
        dead: Vec::new(),
    };
    let ids: Vec<_> = model.params.store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let name = model.params.store.name(id).to_string();
        let size = model.params.store.get(id).len();
        let zeros = vec![0.0; size];
        let g = analytic[slot].as_deref().unwrap_or(&zeros);
        if g.iter().all(|&x| x == 0.0) {
            report.dead.push(name.clone());
        }
        for j in 0..size {
            let original = work.params.store.get(id).data()[j];
            work.params.store.get_mut(id).data_mut()[j] = original + STEP;
            let plus = model_loss(&work, loss);
            work.params.store.get_mut(id).data_mut()[j] = original - STEP;
            let minus = model_loss(&work, loss);
            work.params.store.get_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(g[j], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = format!("{name}[{j}]: tape {} vs numeric {numeric}", g[j]);
            }
            report.checked += 1;
        }
    }
    report
}
