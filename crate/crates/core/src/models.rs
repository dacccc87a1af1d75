//! Desk-scale classifiers `h = g ∘ f` with an explicit split between the
//! feature extractor `f` and the linear head `g`.

use aetlab_autodiff::{AutodiffError, ParamStore, Reduction, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::Norm;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("input shape {got:?} does not match [batch, {expected:?}]")]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("parameter layout mismatch: {0}")]
    Params(String),
    #[error("need at least two distinct samples")]
    DegenerateSamples,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchKind {
    /// Dense layers; `widths` starts with the flattened input size and ends
    /// with the class count.
    Mlp { widths: Vec<usize>, activation: Activation },
    /// conv-relu-pool twice, then a dense head on the flattened activation.
    SmallCnn { channels: [usize; 2], kernel: usize, pool: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub arch: ArchKind,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub seed: u64,
}

impl ArchSpec {
    pub fn mlp(widths: Vec<usize>, activation: Activation, input_shape: [usize; 3], seed: u64) -> Self {
        let num_classes = widths.last().copied().unwrap_or(0);
        ArchSpec {
            arch: ArchKind::Mlp { widths, activation },
            input_shape,
            num_classes,
            seed,
        }
    }

    /// conv(16, 3x3) - relu - pool2 - conv(32, 3x3) - relu - pool2 - dense.
    pub fn small_cnn(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        ArchSpec {
            arch: ArchKind::SmallCnn {
                channels: [16, 32],
                kernel: 3,
                pool: 2,
            },
            input_shape,
            num_classes,
            seed,
        }
    }

    /// Parameter names and shapes in store order.
    pub fn layout(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.num_classes == 0 {
            return Err(ModelError::Spec("input shape and class count must be positive".into()));
        }
        match &self.arch {
            ArchKind::Mlp { widths, .. } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(ModelError::Spec("mlp needs >= 2 positive widths".into()));
                }
                if widths[0] != c * h * w {
                    return Err(ModelError::Spec(format!(
                        "first width {} != flattened input {}",
                        widths[0],
                        c * h * w
                    )));
                }
                if *widths.last().unwrap() != self.num_classes {
                    return Err(ModelError::Spec("final width must equal num_classes".into()));
                }
                Ok(widths
                    .windows(2)
                    .enumerate()
                    .flat_map(|(i, p)| [(format!("fc{i}.w"), vec![p[0], p[1]]), (format!("fc{i}.b"), vec![p[1]])])
                    .collect())
            }
            &ArchKind::SmallCnn { channels, kernel, pool } => {
                let feat = cnn_feature_dim(self.input_shape, channels, kernel, pool)?;
                Ok(vec![
                    ("conv1.w".into(), vec![channels[0], c, kernel, kernel]),
                    ("conv1.b".into(), vec![channels[0]]),
                    ("conv2.w".into(), vec![channels[1], channels[0], kernel, kernel]),
                    ("conv2.b".into(), vec![channels[1]]),
                    ("head.w".into(), vec![feat, self.num_classes]),
                    ("head.b".into(), vec![self.num_classes]),
                ])
            }
        }
    }

    /// Size of the feature vector `f(x)`.
    pub fn feature_dim(&self) -> Result<usize, ModelError> {
        match &self.arch {
            ArchKind::Mlp { widths, .. } => Ok(widths[widths.len() - 2]),
            &ArchKind::SmallCnn { channels, kernel, pool } => cnn_feature_dim(self.input_shape, channels, kernel, pool),
        }
    }
}

fn cnn_feature_dim(input: [usize; 3], channels: [usize; 2], kernel: usize, pool: usize) -> Result<usize, ModelError> {
    if channels.contains(&0) || kernel == 0 || pool == 0 {
        return Err(ModelError::Spec("channels, kernel and pool must be positive".into()));
    }
    let stage = |n: usize| -> Result<usize, ModelError> {
        if n < kernel || (n - kernel + 1) / pool == 0 {
            return Err(ModelError::Spec(format!(
                "spatial size {n} too small for kernel {kernel}, pool {pool}"
            )));
        }
        Ok((n - kernel + 1) / pool)
    };
    let (h, w) = (stage(stage(input[1])?)?, stage(stage(input[2])?)?);
    Ok(channels[1] * h * w)
}

/// Parameters of `h` registered on a tape, so several forward passes in one
/// loss share the same leaves.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeModel {
    spec: ArchSpec,
    params: ParamStore,
}

impl CompositeModel {
    /// Gaussian init with std `sqrt(2 / fan_in)`, zero biases.
    pub fn build(spec: ArchSpec) -> Result<Self, ModelError> {
        let layout = spec.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            params.push(name, Tensor::new(shape, data).map_err(ModelError::Autodiff)?);
        }
        Ok(CompositeModel { spec, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(spec: ArchSpec, params: ParamStore) -> Result<Self, ModelError> {
        let layout = spec.layout()?;
        check_layout(&layout, &params)?;
        Ok(CompositeModel { spec, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<(), ModelError> {
        check_layout(&self.spec.layout()?, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Registers all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, t)| tape.param(name, t.clone(), requires_grad))
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(ModelError::InputShape {
                expected: self.spec.input_shape,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records `f(x)` as a `[batch, feature_dim]` node.
    pub fn record_features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        self.check_input(tape.value(x).shape())?;
        match &self.spec.arch {
            ArchKind::Mlp { widths, activation } => {
                let mut h = tape.flatten(x)?;
                for layer in 0..widths.len() - 2 {
                    h = tape.matmul(h, bound.get(2 * layer))?;
                    h = tape.add_bias(h, bound.get(2 * layer + 1))?;
                    if *activation == Activation::Relu {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            ArchKind::SmallCnn { pool, .. } => {
                let mut h = x;
                for stage in 0..2 {
                    h = tape.conv2d(h, bound.get(2 * stage), 0)?;
                    h = tape.add_bias(h, bound.get(2 * stage + 1))?;
                    h = tape.relu(h)?;
                    h = tape.avg_pool2d(h, *pool)?;
                }
                Ok(tape.flatten(h)?)
            }
        }
    }

    /// Records the head `g(z)`.
    pub fn record_head(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var, ModelError> {
        let last = bound.vars.len() - 2;
        let z = tape.matmul(features, bound.get(last))?;
        Ok(tape.add_bias(z, bound.get(last + 1))?)
    }

    /// Records `(f(x), h(x))`.
    pub fn record(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var), ModelError> {
        let features = self.record_features(tape, bound, x)?;
        let logits = self.record_head(tape, bound, features)?;
        Ok((features, logits))
    }

    /// Logits, plus the feature tap when requested.
    pub fn forward(&self, x: &Tensor, tap_features: bool) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.input(x.clone(), false);
        let (features, logits) = self.record(&mut tape, &bound, xv)?;
        let tapped = tap_features.then(|| tape.value(features).clone());
        Ok((tape.value(logits).clone(), tapped))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(x, false)?.0)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.input(x.clone(), false);
        let f = self.record_features(&mut tape, &bound, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Applies `g` alone to a `[batch, feature_dim]` tensor.
    pub fn head(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.input(features.clone(), false);
        let logits = self.record_head(&mut tape, &bound, z)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Cross-entropy of each example.
    pub fn per_example_loss(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits(x)?;
        Ok(cross_entropy_rows(&logits, labels))
    }

    /// Mean cross-entropy on a tape, as used by the training loop.
    pub fn record_loss(&self, tape: &mut Tape, bound: &Bound, x: Var, labels: &[usize]) -> Result<Var, ModelError> {
        let (_, logits) = self.record(tape, bound, x)?;
        Ok(tape.softmax_cross_entropy(logits, labels, Reduction::Mean)?)
    }
}

fn check_layout(layout: &[(String, Vec<usize>)], params: &ParamStore) -> Result<(), ModelError> {
    if params.len() != layout.len() {
        return Err(ModelError::Params(format!(
            "expected {} tensors, got {}",
            layout.len(),
            params.len()
        )));
    }
    for ((want_name, want_shape), (name, t)) in layout.iter().zip(params.iter()) {
        if want_name != name || want_shape.as_slice() != t.shape() {
            return Err(ModelError::Params(format!(
                "expected {want_name}{want_shape:?}, got {name}{:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// `logsumexp(z) - z_y` per row.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

pub fn norm(v: &[f64], p: Norm) -> f64 {
    match p {
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

fn diff_norm(a: &[f64], b: &[f64], p: Norm) -> f64 {
    match p {
        Norm::Linf => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
        Norm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// Index pairs `(i, j)`, `i < j`: all of them when they fit in `budget`,
/// otherwise `budget` seeded draws.
pub fn sample_pairs(n: usize, budget: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= budget {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..budget)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

/// Largest ratio `||f(a) - f(b)|| / ||a - b||` over the given pairs of rows
/// of `inputs`; a lower bound on the Lipschitz constant of `f`.
pub fn lipschitz_over_pairs<F>(f: F, inputs: &Tensor, pairs: &[(usize, usize)], p: Norm) -> Result<f64, ModelError>
where
    F: Fn(&Tensor) -> Result<Tensor, ModelError>,
{
    let n = inputs.shape()[0];
    let outputs = f(inputs)?;
    let (din, dout) = (inputs.numel() / n.max(1), outputs.numel() / n.max(1));
    let (xs, fs) = (inputs.data(), outputs.data());
    let mut best: Option<f64> = None;
    for &(i, j) in pairs {
        let dx = diff_norm(&xs[i * din..(i + 1) * din], &xs[j * din..(j + 1) * din], p);
        if dx == 0.0 {
            continue;
        }
        let df = diff_norm(&fs[i * dout..(i + 1) * dout], &fs[j * dout..(j + 1) * dout], p);
        best = Some(best.map_or(df / dx, |b: f64| b.max(df / dx)));
    }
    best.ok_or(ModelError::DegenerateSamples)
}

/// Pairwise-ratio estimate of the Lipschitz constant of `f` on `samples`
/// (at most `pair_budget` pairs).
pub fn lipschitz_estimate<F>(f: F, samples: &Tensor, pair_budget: usize, p: Norm, seed: u64) -> Result<f64, ModelError>
where
    F: Fn(&Tensor) -> Result<Tensor, ModelError>,
{
    let n = samples.shape()[0];
    if n < 2 {
        return Err(ModelError::DegenerateSamples);
    }
    lipschitz_over_pairs(f, samples, &sample_pairs(n, pair_budget, seed), p)
}

/// Feature-map estimate mixing clean-clean pairs with each clean example
/// paired to its perturbed counterpart; half the budget goes to each kind.
pub fn feature_lipschitz(
    model: &CompositeModel,
    clean: &Tensor,
    perturbed: &Tensor,
    pair_budget: usize,
    p: Norm,
    seed: u64,
) -> Result<f64, ModelError> {
    let n = clean.shape()[0];
    if perturbed.shape() != clean.shape() || n < 1 {
        return Err(ModelError::DegenerateSamples);
    }
    let mut data = clean.data().to_vec();
    data.extend_from_slice(perturbed.data());
    let mut shape = clean.shape().to_vec();
    shape[0] = 2 * n;
    let stacked = Tensor::new(shape, data)?;
    let mut pairs = sample_pairs(n, pair_budget / 2, seed);
    pairs.extend((0..n).take(pair_budget - pair_budget / 2).map(|i| (i, n + i)));
    lipschitz_over_pairs(|x| model.features(x), &stacked, &pairs, p)
}
