//! Oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfsynth::data::{Batch, Example};
use selfsynth::model::{is_frozen, Bound, ModelConfig, ModelParams};
use selfsynth::tensor::{attention, AttnShape, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error: below it the comparison is
/// effectively absolute, so near-zero gradients do not blow up the ratio.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Central-difference check of `f` over every element of every input.
/// Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Reduces any output to a scalar through a fixed random projection.
pub fn project_sum<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(&y.shape(), &mut rng));
    y.mul(w).unwrap().sum().unwrap()
}

/// Worst finite-difference error of each differentiable primitive on
/// randomized small shapes.
pub fn primitive_gradients(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let m = 2 + rng.gen_range(0..3);
    let k = 2 + rng.gen_range(0..3);
    let n = 2 + rng.gen_range(0..3);

    let (a, b) = (randn(&[m, k], &mut rng), randn(&[k, n], &mut rng));
    out.push(("matmul", grad_check(&[a, b], |t, v| project_sum(t, v[0].matmul(v[1]).unwrap(), 1))));

    let a = randn(&[m, k], &mut rng);
    out.push(("transpose", grad_check(&[a], |t, v| project_sum(t, v[0].transpose().unwrap(), 2))));

    let (a, b) = (randn(&[m, k], &mut rng), randn(&[m, k], &mut rng));
    out.push(("add", grad_check(&[a.clone(), b.clone()], |t, v| project_sum(t, v[0].add(v[1]).unwrap(), 3))));
    out.push(("mul", grad_check(&[a, b], |t, v| project_sum(t, v[0].mul(v[1]).unwrap(), 4))));

    let (a, bias) = (randn(&[m, k], &mut rng), randn(&[k], &mut rng));
    out.push(("add_row", grad_check(&[a, bias], |t, v| project_sum(t, v[0].add_row(v[1]).unwrap(), 5))));

    let a = randn(&[m, k], &mut rng);
    out.push(("scale", grad_check(std::slice::from_ref(&a), |t, v| project_sum(t, v[0].scale(-1.7).unwrap(), 6))));
    out.push(("sum", grad_check(&[a], |_, v| v[0].sum().unwrap())));

    let x = randn(&[2, 3, 4], &mut rng);
    for (axis, name) in [(0, "softmax axis 0"), (1, "softmax axis 1"), (2, "softmax axis 2")] {
        out.push((name, grad_check(std::slice::from_ref(&x), |t, v| project_sum(t, v[0].softmax(axis).unwrap(), 7))));
    }

    let (x, g) = (randn(&[m, 8], &mut rng), randn(&[8], &mut rng));
    out.push(("rms_norm", grad_check(&[x, g], |t, v| project_sum(t, v[0].rms_norm(v[1], 1e-6).unwrap(), 8))));

    let x = randn(&[m, k], &mut rng);
    out.push(("gelu", grad_check(std::slice::from_ref(&x), |t, v| project_sum(t, v[0].gelu().unwrap(), 9))));
    out.push(("silu", grad_check(&[x], |t, v| project_sum(t, v[0].silu().unwrap(), 10))));

    let x = randn(&[5, 8], &mut rng);
    out.push((
        "rope",
        grad_check(&[x], |t, v| project_sum(t, v[0].rope(2, &[0, 1, 2, 7, 3], 10000.0).unwrap(), 11)),
    ));

    let x = randn(&[4, 3], &mut rng);
    out.push((
        "gather_rows",
        grad_check(std::slice::from_ref(&x), |t, v| project_sum(t, v[0].gather_rows(&[2, 0, 2, 3, 1]).unwrap(), 12)),
    ));
    out.push(("reshape", grad_check(&[x], |t, v| project_sum(t, v[0].reshape(&[2, 6]).unwrap(), 13))));

    let (a, b) = (randn(&[2, 3], &mut rng), randn(&[3, 3], &mut rng));
    out.push((
        "concat_rows",
        grad_check(&[a, b], |t, v| project_sum(t, t.concat_rows(&[v[0], v[1]]).unwrap(), 14)),
    ));

    let logits = randn(&[5, 6], &mut rng);
    out.push((
        "cross_entropy_masked",
        grad_check(&[logits], |_, v| {
            v[0].cross_entropy_masked(&[1, 5, 0, 2, 2], &[true, false, true, true, false])
                .unwrap()
        }),
    ));

    for causal in [true, false] {
        let shape = AttnShape { batch: 2, seq: 3, heads: 2, head_dim: 2, causal };
        let q = randn(&[6, 4], &mut rng);
        let kk = randn(&[6, 4], &mut rng);
        let vv = randn(&[6, 4], &mut rng);
        let name = if causal { "attention causal" } else { "attention full" };
        out.push((
            name,
            grad_check(&[q, kk, vv], move |t, v| project_sum(t, attention(v[0], v[1], v[2], shape).unwrap(), 15)),
        ));
    }
    out
}

/// Toy config small enough for finite differences over the whole model.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vocab);
    cfg.hidden_dim = 8;
    cfg.intermediate_dim = 12;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg
}

pub fn random_grouped(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(&[cfg.n_image_slots(), cfg.grouped_dim()], rng)
}

/// Finite-difference check of the full masked next-token loss with respect
/// to every trainable tensor (at most `per_tensor` sampled elements each).
/// Returns `(tensor name, worst error)` pairs.
pub fn model_gradients(with_image: bool, per_tensor: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(11);
    let mut params = ModelParams::<f64>::init(&cfg, seed).unwrap();
    // nonzero biases and norm gains so their gradients are exercised
    let names: Vec<String> = params.names().map(String::from).collect();
    for n in &names {
        if !is_frozen(n) && (n.ends_with("norm") || n.ends_with(".b1") || n.ends_with(".b2")) {
            for v in params.get_mut(n).unwrap().data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let examples = vec![
        Example { tokens: vec![1, 5, 7, 9, 2], image: with_image.then_some(0) },
        Example { tokens: vec![1, 4, 10, 2], image: with_image.then_some(1) },
    ];
    let batch = Batch::from_examples(&examples, &[0, 1]).unwrap();
    let images = [random_grouped(&cfg, &mut rng), random_grouped(&cfg, &mut rng)];

    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let tape = Tape::new();
        let b = Bound::new(&tape, p, |_| false);
        let imgs: Vec<&Tensor<f64>> = images.iter().collect();
        b.batch_loss(&batch, with_image.then_some(&imgs[..])).unwrap().item()
    };

    let tape = Tape::new();
    let bound = Bound::new(&tape, &params, |n| !is_frozen(n));
    let imgs: Vec<&Tensor<f64>> = images.iter().collect();
    let loss = bound.batch_loss(&batch, with_image.then_some(&imgs[..])).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut out = Vec::new();
    for (name, var) in bound.vars() {
        if !with_image && name.starts_with("proj.") {
            continue;
        }
        let analytic = grads.get_or_zeros(var);
        let len = analytic.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        let mut worst = 0.0f64;
        let mut p = params.clone();
        for j in picks {
            let x0 = p.get(name).unwrap().data()[j];
            p.get_mut(name).unwrap().data_mut()[j] = x0 + FD_STEP;
            let up = loss_of(&p);
            p.get_mut(name).unwrap().data_mut()[j] = x0 - FD_STEP;
            let down = loss_of(&p);
            p.get_mut(name).unwrap().data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
        out.push((name.to_string(), worst));
    }
    out
}

/// Exhaustive filter oracle: top-k is the unique subset of size k that
/// dominates its complement (ties to the lower id); the nucleus is the
/// smallest rank-closed subset of it holding at least `top_p` of its mass.
pub fn brute_force_filter(logits: &[f64], temperature: f64, top_k: usize, top_p: f64) -> Vec<f64> {
    let n = logits.len();
    let w: Vec<f64> = logits.iter().map(|z| (z / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let before = |i: usize, j: usize| p[i] > p[j] || (p[i] == p[j] && i < j);
    let k = top_k.min(n);
    let subsets = || (0u32..1 << n).map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect::<Vec<usize>>());
    let top: Vec<usize> = subsets()
        .find(|s| s.len() == k && s.iter().all(|&i| (0..n).filter(|j| !s.contains(j)).all(|j| before(i, j))))
        .expect("a dominating subset exists");
    let top_mass: f64 = top.iter().map(|&i| p[i]).sum();
    let mut best: Option<Vec<usize>> = None;
    for s in subsets() {
        if s.is_empty() || !s.iter().all(|i| top.contains(i)) {
            continue;
        }
        let closed = s
            .iter()
            .all(|&i| top.iter().filter(|j| !s.contains(j)).all(|&j| before(i, j)));
        let mass: f64 = s.iter().map(|&i| p[i]).sum::<f64>() / top_mass;
        if closed && mass >= top_p && best.as_ref().is_none_or(|b| s.len() < b.len()) {
            best = Some(s);
        }
    }
    let keep = best.unwrap_or(top);
    let mass: f64 = keep.iter().map(|&i| p[i]).sum();
    (0..n).map(|i| if keep.contains(&i) { p[i] / mass } else { 0.0 }).collect()
}

/// Upper 1% point of the chi-square distribution, df 1..=10.
pub const CHI2_99: [f64; 10] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209];

pub fn chi_square(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

/// Exact chance rates of (text, image, group) for four i.i.d. continuous
/// scores, by enumerating all 24 orderings.
pub fn null_match_rates() -> (f64, f64, f64) {
    let mut perms = Vec::new();
    permute(&mut vec![0, 1, 2, 3], 0, &mut perms);
    let (mut t, mut i, mut g) = (0, 0, 0);
    for r in &perms {
        // r[c] is the rank of cell c = 2j + k, i.e. s(C_j, I_k)
        let s = |j: usize, k: usize| r[2 * j + k];
        let text = s(0, 0) > s(1, 0) && s(1, 1) > s(0, 1);
        let image = s(0, 0) > s(0, 1) && s(1, 1) > s(1, 0);
        t += text as u32;
        i += image as u32;
        g += (text && image) as u32;
    }
    let n = perms.len() as f64;
    (t as f64 / n, i as f64 / n, g as f64 / n)
}

fn permute(v: &mut Vec<usize>, at: usize, out: &mut Vec<Vec<usize>>) {
    if at == v.len() {
        out.push(v.clone());
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, out);
        v.swap(at, i);
    }
}

/// Per-position softmax oracle: plain f64 log-softmax over each row of the
/// model's logits for `[BOS] + tokens`.
pub fn per_position_log_prob(logits: &Tensor<f64>, tokens: &[u32]) -> f64 {
    let v = logits.cols();
    let mut total = 0.0;
    for (pos, &t) in tokens.iter().enumerate() {
        let row = &logits.data()[pos * v..(pos + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += row[t as usize] - lse;
    }
    total
}

/// Sequence score rebuilt one token at a time through the incremental
/// decoder, then scored with [`per_position_log_prob`].
pub fn incremental_log_prob(p: &ModelParams<f64>, tokens: &[u32], image: Option<&Tensor<f64>>) -> f64 {
    let mut dec = selfsynth::model::IncrementalDecoder::new(p);
    if let Some(g) = image {
        dec.push_image(g).unwrap();
    }
    let v = p.config().vocab_size;
    let mut rows = dec.push_token(selfsynth::tokenizer::BOS).unwrap();
    for &t in &tokens[..tokens.len() - 1] {
        rows.extend(dec.push_token(t).unwrap());
    }
    per_position_log_prob(&Tensor::new([tokens.len(), v], rows).unwrap(), tokens)
}
