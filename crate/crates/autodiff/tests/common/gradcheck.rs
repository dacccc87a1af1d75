//! Central finite-difference oracle for tape gradients.
//!
//! Every differentiable quantity is registered as a tape *input*, so the
//! oracle can perturb it and replay the recorded forward pass without going
//! through any backward rule.

use aetlab_autodiff::{Reduction, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub struct Built {
    pub inputs: Vec<Var>,
    pub loss: Var,
}

pub type Builder = fn(&mut Tape, &mut ChaCha8Rng) -> Built;

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal samples pushed at least `gap` away from zero, so a perturbation of
/// size [`STEP`] can never cross a relu kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs());
    }
    t
}

/// Contracts `v` with a fixed random vector to get a scalar.
pub fn project(tape: &mut Tape, v: Var, rng: &mut ChaCha8Rng) -> Var {
    let n = tape.value(v).numel();
    let flat = tape.reshape(v, vec![1, n]).unwrap();
    let r = tape.constant(normal(rng, &[n, 1]));
    tape.matmul(flat, r).unwrap()
}

/// Normwise relative error `|a - n| / (|a| + |n|)`, reported as 0 when both
/// gradients vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs of a built case.
pub fn check(build: Builder, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let Built { inputs, loss } = build(&mut tape, &mut rng);
    let grads = tape.backward(loss).unwrap();
    let values: Vec<Tensor> = inputs.iter().map(|&v| tape.value(v).clone()).collect();

    let mut worst = 0.0f64;
    for (i, var) in inputs.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("input registered with requires_grad");
        let mut numeric = vec![0.0; values[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut eval_at = |delta: f64| {
                let mut shifted = values.clone();
                shifted[i].data_mut()[j] += delta;
                tape.forward_eval(&shifted).unwrap().item().unwrap()
            };
            *slot = (eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

fn inputs(tape: &mut Tape, tensors: Vec<Tensor>) -> Vec<Var> {
    tensors.into_iter().map(|t| tape.input(t, true)).collect()
}

pub fn case_matmul(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[3, 4]), normal(rng, &[4, 2])]);
    let y = tape.matmul(v[0], v[1]).unwrap();
    let loss = project(tape, y, rng);
    Built { inputs: v, loss }
}

pub fn case_conv_valid(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[2, 2, 5, 5]), normal(rng, &[3, 2, 3, 3])]);
    let y = tape.conv2d(v[0], v[1], 0).unwrap();
    let loss = project(tape, y, rng);
    Built { inputs: v, loss }
}

pub fn case_conv_padded(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[2, 1, 4, 5]), normal(rng, &[2, 1, 3, 3])]);
    let y = tape.conv2d(v[0], v[1], 1).unwrap();
    let loss = project(tape, y, rng);
    Built { inputs: v, loss }
}

pub fn case_add_bias(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(
        tape,
        vec![
            normal(rng, &[2, 3, 2, 2]),
            normal(rng, &[3]),
            normal(rng, &[4, 5]),
            normal(rng, &[5]),
        ],
    );
    let a = tape.add_bias(v[0], v[1]).unwrap();
    let b = tape.add_bias(v[2], v[3]).unwrap();
    let la = project(tape, a, rng);
    let lb = project(tape, b, rng);
    let loss = tape.add(la, lb).unwrap();
    Built { inputs: v, loss }
}

pub fn case_add_scale(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[3, 3]), normal(rng, &[3, 3])]);
    let s = tape.add(v[0], v[1]).unwrap();
    let s = tape.scale(s, -1.7).unwrap();
    let loss = project(tape, s, rng);
    Built { inputs: v, loss }
}

pub fn case_relu(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![off_kink(rng, &[4, 6], 1e-3)]);
    let y = tape.relu(v[0]).unwrap();
    let loss = project(tape, y, rng);
    Built { inputs: v, loss }
}

pub fn case_reshape(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[2, 3, 2, 2])]);
    let f = tape.flatten(v[0]).unwrap();
    let r = tape.reshape(f, vec![4, 6]).unwrap();
    let loss = project(tape, r, rng);
    Built { inputs: v, loss }
}

pub fn case_avg_pool(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[2, 2, 5, 4])]);
    let y = tape.avg_pool2d(v[0], 2).unwrap();
    let loss = project(tape, y, rng);
    Built { inputs: v, loss }
}

pub fn case_cross_entropy(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[5, 4])]);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let reduction = if rng.random::<bool>() { Reduction::Mean } else { Reduction::Sum };
    let loss = tape.softmax_cross_entropy(v[0], &labels, reduction).unwrap();
    Built { inputs: v, loss }
}

pub fn case_kl(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])]);
    let loss = tape.kl_divergence(v[0], v[1], Reduction::Mean).unwrap();
    Built { inputs: v, loss }
}

pub fn case_l2_norm(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let v = inputs(tape, vec![normal(rng, &[3, 5])]);
    let loss = tape.l2_norm(v[0]).unwrap();
    Built { inputs: v, loss }
}

/// Two-layer relu MLP with cross-entropy; weights, biases and the input
/// batch are all checked.
pub fn case_mlp(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let x = normal(rng, &[4, 3]);
    let w1 = normal(rng, &[3, 6]);
    let b1 = normal(rng, &[6]);
    let w2 = normal(rng, &[6, 3]);
    let b2 = normal(rng, &[3]);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let v = inputs(tape, vec![x, w1, b1, w2, b2]);
    let h = tape.matmul(v[0], v[1]).unwrap();
    let h = tape.add_bias(h, v[2]).unwrap();
    let h = tape.relu(h).unwrap();
    let z = tape.matmul(h, v[3]).unwrap();
    let z = tape.add_bias(z, v[4]).unwrap();
    let loss = tape.softmax_cross_entropy(z, &labels, Reduction::Mean).unwrap();
    Built { inputs: v, loss }
}

/// conv -> relu -> pool -> flatten -> dense -> cross-entropy.
pub fn case_cnn(tape: &mut Tape, rng: &mut ChaCha8Rng) -> Built {
    let x = normal(rng, &[2, 1, 6, 6]);
    let k = normal(rng, &[2, 1, 3, 3]);
    let kb = normal(rng, &[2]);
    let w = normal(rng, &[8, 3]);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let v = inputs(tape, vec![x, k, kb, w]);
    let c = tape.conv2d(v[0], v[1], 0).unwrap();
    let c = tape.add_bias(c, v[2]).unwrap();
    let c = tape.relu(c).unwrap();
    let p = tape.avg_pool2d(c, 2).unwrap();
    let f = tape.flatten(p).unwrap();
    let z = tape.matmul(f, v[3]).unwrap();
    let loss = tape.softmax_cross_entropy(z, &labels, Reduction::Sum).unwrap();
    Built { inputs: v, loss }
}

pub const PRIMITIVES: &[(&str, Builder)] = &[
    ("matmul", case_matmul),
    ("conv2d (no padding)", case_conv_valid),
    ("conv2d (padding 1)", case_conv_padded),
    ("add_bias", case_add_bias),
    ("add + scale", case_add_scale),
    ("relu", case_relu),
    ("reshape/flatten", case_reshape),
    ("avg_pool2d", case_avg_pool),
    ("softmax_cross_entropy", case_cross_entropy),
    ("kl_divergence", case_kl),
    ("l2_norm", case_l2_norm),
];

pub const COMPOSED: &[(&str, Builder)] = &[("mlp", case_mlp), ("cnn", case_cnn)];

/// Runs every case over `seeds` and returns `(name, worst error)`.
pub fn sweep(cases: &[(&'static str, Builder)], seeds: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .map(|&(name, build)| {
            let worst = (0..seeds).map(|s| check(build, s)).fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}
