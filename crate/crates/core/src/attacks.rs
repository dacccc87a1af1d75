//! Perturbation sets and attacks: ball projection, FGSM, PGD (with
//! restarts), Carlini-Wagner L2, and an exhaustive grid search used as a
//! ground-truth inner maximizer on tiny inputs.

use aetlab_autodiff::{Reduction, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::models::{cross_entropy_rows, CompositeModel, ModelError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttackError {
    #[error("{0} requires an l-infinity threat model")]
    NeedsLinf(&'static str),
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("brute force over {levels}^{dim} grid points exceeds the guard (dim <= 6, <= 1e6 points)")]
    Guard { dim: usize, levels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[serde(alias = "inf")]
    Linf,
    L2,
}

/// The ball `B_p(x, delta)` intersected with the pixel box `clip`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatModel {
    pub norm: Norm,
    pub delta: f64,
    #[serde(default = "unit_box")]
    pub clip: (f64, f64),
}

fn unit_box() -> (f64, f64) {
    (0.0, 1.0)
}

impl ThreatModel {
    pub fn linf(delta: f64) -> Self {
        ThreatModel {
            norm: Norm::Linf,
            delta,
            clip: unit_box(),
        }
    }

    pub fn l2(delta: f64) -> Self {
        ThreatModel {
            norm: Norm::L2,
            delta,
            clip: unit_box(),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(AttackError::Config(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        if !(self.clip.0 < self.clip.1) {
            return Err(AttackError::Config("clip range must be non-empty".into()));
        }
        Ok(())
    }
}

/// Projects one example in place onto the threat set around `center`. For
/// `L2` the offset is rescaled radially to length `delta`, then clipped.
pub fn project_ball(candidate: &mut [f64], center: &[f64], threat: &ThreatModel) {
    let (lo, hi) = threat.clip;
    match threat.norm {
        Norm::Linf => {
            for (v, &c) in candidate.iter_mut().zip(center) {
                *v = v.clamp(c - threat.delta, c + threat.delta).clamp(lo, hi);
            }
        }
        Norm::L2 => {
            let n = candidate.iter().zip(center).map(|(v, c)| (v - c) * (v - c)).sum::<f64>().sqrt();
            if n > threat.delta * (1.0 + 1e-12) {
                let s = threat.delta / n;
                for (v, &c) in candidate.iter_mut().zip(center) {
                    *v = c + (*v - c) * s;
                }
            }
            for v in candidate.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// Applies [`project_ball`] to every example of a batch.
pub fn project_batch(candidate: &mut Tensor, center: &Tensor, threat: &ThreatModel) {
    let per = center.numel() / center.shape()[0].max(1);
    for (v, c) in candidate.data_mut().chunks_exact_mut(per).zip(center.data().chunks_exact(per)) {
        project_ball(v, c, threat);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// What the attacker maximizes.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy(&'a [usize]),
    /// `KL(softmax(reference) || softmax(h(x')))`, the TRADES inner loss.
    Kl(&'a Tensor),
}

/// Gradient of the summed objective with respect to the input batch.
pub fn input_gradient(model: &CompositeModel, x: &Tensor, objective: Objective) -> Result<Tensor, AttackError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.input(x.clone(), true);
    let (_, logits) = model.record(&mut tape, &bound, xv)?;
    let loss = match objective {
        Objective::CrossEntropy(labels) => tape.softmax_cross_entropy(logits, labels, Reduction::Sum),
        Objective::Kl(reference) => {
            let r = tape.constant(reference.clone());
            tape.kl_divergence(r, logits, Reduction::Sum)
        }
    }
    .map_err(ModelError::from)?;
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    Ok(grads.into_input(0).expect("input registered with requires_grad"))
}

/// `clip(x + delta * sign(grad))`.
pub fn fgsm(model: &CompositeModel, x: &Tensor, y: &[usize], threat: &ThreatModel) -> Result<Tensor, AttackError> {
    threat.validate()?;
    if threat.norm != Norm::Linf {
        return Err(AttackError::NeedsLinf("fgsm"));
    }
    if threat.delta == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, Objective::CrossEntropy(y))?;
    let (lo, hi) = threat.clip;
    let mut out = x.clone();
    for (v, gi) in out.data_mut().iter_mut().zip(g.data()) {
        let s = sign(*gi);
        if s != 0.0 {
            *v = (*v + threat.delta * s).clamp(lo, hi);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub threat: ThreatModel,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl PgdConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        self.threat.validate()?;
        if !(self.alpha > 0.0) || self.steps == 0 {
            return Err(AttackError::Config("pgd needs alpha > 0 and steps >= 1".into()));
        }
        Ok(())
    }

    /// Same attack with a different radius.
    pub fn with_delta(mut self, delta: f64) -> Self {
        self.threat.delta = delta;
        self
    }
}

/// Uniform draw from the ball around each example (box for `Linf`, radial
/// resampling for `L2`), projected onto the threat set.
fn random_start(x: &Tensor, threat: &ThreatModel, rng: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    let per = x.numel() / x.shape()[0].max(1);
    let d = threat.delta;
    match threat.norm {
        Norm::Linf => {
            for v in out.data_mut() {
                *v += rng.random_range(-1.0..=1.0) * d;
            }
        }
        Norm::L2 => {
            for chunk in out.data_mut().chunks_exact_mut(per) {
                let dir: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = d * rng.random::<f64>().powf(1.0 / per as f64);
                if n > 0.0 {
                    for (v, u) in chunk.iter_mut().zip(&dir) {
                        *v += r * u / n;
                    }
                }
            }
        }
    }
    project_batch(&mut out, x, threat);
    out
}

/// Projected steepest ascent on `objective` from `start`.
pub fn pgd_from(model: &CompositeModel, x: &Tensor, start: Tensor, objective: Objective, cfg: &PgdConfig) -> Result<Tensor, AttackError> {
    let per = x.numel() / x.shape()[0].max(1);
    let mut adv = start;
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &adv, objective)?;
        match cfg.threat.norm {
            Norm::Linf => {
                for (v, gi) in adv.data_mut().iter_mut().zip(g.data()) {
                    *v += cfg.alpha * sign(*gi);
                }
            }
            Norm::L2 => {
                for (v, gi) in adv.data_mut().chunks_exact_mut(per).zip(g.data().chunks_exact(per)) {
                    let n = gi.iter().map(|t| t * t).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (a, b) in v.iter_mut().zip(gi) {
                            *a += cfg.alpha * b / n;
                        }
                    }
                }
            }
        }
        project_batch(&mut adv, x, &cfg.threat);
    }
    Ok(adv)
}

/// PGD on the cross-entropy. A zero radius returns `x` without drawing from
/// `rng`.
pub fn pgd(model: &CompositeModel, x: &Tensor, y: &[usize], cfg: &PgdConfig, rng: &mut impl Rng) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    if cfg.threat.delta == 0.0 {
        return Ok(x.clone());
    }
    let start = if cfg.random_start {
        random_start(x, &cfg.threat, rng)
    } else {
        x.clone()
    };
    pgd_from(model, x, start, Objective::CrossEntropy(y), cfg)
}

/// Runs [`pgd`] `restarts` times and keeps, per example, the iterate with
/// the highest loss.
pub fn pgd_restarts(
    model: &CompositeModel,
    x: &Tensor,
    y: &[usize],
    cfg: &PgdConfig,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<Tensor, AttackError> {
    let per = x.numel() / x.shape()[0].max(1);
    let mut best = pgd(model, x, y, cfg, rng)?;
    let mut best_loss = model.per_example_loss(&best, y)?;
    for _ in 1..restarts.max(1) {
        let cand = pgd(model, x, y, cfg, rng)?;
        let loss = model.per_example_loss(&cand, y)?;
        for (i, (&l, b)) in loss.iter().zip(best_loss.iter_mut()).enumerate() {
            if l > *b {
                *b = l;
                best.data_mut()[i * per..(i + 1) * per].copy_from_slice(&cand.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Ok(best)
}

/// TRADES inner maximization: start at `x + 0.001 * N(0, 1)`, then PGD on
/// `KL(h(x) || h(x'))`.
pub fn trades_perturb(model: &CompositeModel, x: &Tensor, cfg: &PgdConfig, rng: &mut impl Rng) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    if cfg.threat.delta == 0.0 {
        return Ok(x.clone());
    }
    let reference = model.logits(x)?;
    let mut start = x.clone();
    for v in start.data_mut() {
        *v += 0.001 * rng.sample::<f64, _>(StandardNormal);
    }
    project_batch(&mut start, x, &cfg.threat);
    pgd_from(model, x, start, Objective::Kl(&reference), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    /// Weight on the margin term.
    pub c: f64,
    /// Margin the attack must clear.
    pub kappa: f64,
    pub steps: usize,
    pub lr: f64,
}

impl CwConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.c > 0.0) || !(self.kappa >= 0.0) || !(self.lr > 0.0) {
            return Err(AttackError::Config("cw needs c > 0, kappa >= 0, lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwResult {
    /// Lowest-distortion adversarial found per example, else the input.
    pub adversarial: Tensor,
    pub found: Vec<bool>,
    /// `||x' - x||_2` of the returned example (0 when nothing was found).
    pub distortion: Vec<f64>,
}

/// Inputs are pulled into `(EPS0, 1 - EPS0)` so `atanh` stays finite.
const CW_NUDGE: f64 = 1e-6;

/// Untargeted CW-L2 with a fixed `c`: Adam on `w`, `x' = (tanh(w) + 1) / 2`,
/// minimizing `||x' - x||^2 + c * max(Z_y - max_{k != y} Z_k, -kappa)`.
pub fn cw_l2(model: &CompositeModel, x: &Tensor, y: &[usize], cfg: &CwConfig) -> Result<CwResult, AttackError> {
    cfg.validate()?;
    let b = x.shape()[0];
    let per = x.numel() / b.max(1);
    let k = model.num_classes();
    let mut w: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (2.0 * v.clamp(CW_NUDGE, 1.0 - CW_NUDGE) - 1.0).atanh())
        .collect();
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);

    let mut result = CwResult {
        adversarial: x.clone(),
        found: vec![false; b],
        distortion: vec![0.0; b],
    };
    let mut best = vec![f64::INFINITY; b];

    for step in 0..=cfg.steps {
        let xp: Vec<f64> = w.iter().map(|t| (t.tanh() + 1.0) / 2.0).collect();
        let xp_t = Tensor::new(x.shape().to_vec(), xp.clone()).map_err(ModelError::from)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.input(xp_t, true);
        let (_, logits) = model.record(&mut tape, &bound, xv)?;
        let z = tape.value(logits).data().to_vec();

        let mut mask = vec![0.0; b * k];
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let (j, other) = (0..k)
                .filter(|&j| j != y[i])
                .map(|j| (j, row[j]))
                .fold((usize::MAX, f64::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
            let margin = row[y[i]] - other;
            let dist2: f64 = xp[i * per..(i + 1) * per]
                .iter()
                .zip(&x.data()[i * per..(i + 1) * per])
                .map(|(a, c)| (a - c) * (a - c))
                .sum();
            if margin <= -cfg.kappa && margin < 0.0 && dist2 < best[i] {
                best[i] = dist2;
                result.found[i] = true;
                result.distortion[i] = dist2.sqrt();
                result.adversarial.data_mut()[i * per..(i + 1) * per].copy_from_slice(&xp[i * per..(i + 1) * per]);
            }
            if margin > -cfg.kappa && j != usize::MAX {
                mask[i * k + y[i]] = 1.0;
                mask[i * k + j] = -1.0;
            }
        }
        if step == cfg.steps {
            break;
        }

        // d/dx' of the margin term via the tape; the distortion term and the
        // tanh chain rule are applied by hand.
        let flat = tape.reshape(logits, vec![1, b * k]).map_err(ModelError::from)?;
        let mv = tape.constant(Tensor::new(vec![b * k, 1], mask).map_err(ModelError::from)?);
        let margin_sum = tape.matmul(flat, mv).map_err(ModelError::from)?;
        let grads = tape.backward(margin_sum).map_err(ModelError::from)?;
        let gm = grads.into_input(0).expect("input gradient");

        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for idx in 0..w.len() {
            let dx = 2.0 * (xp[idx] - x.data()[idx]) + cfg.c * gm.data()[idx];
            let th = w[idx].tanh();
            let g = dx * (1.0 - th * th) / 2.0;
            m[idx] = beta1 * m[idx] + (1.0 - beta1) * g;
            v[idx] = beta2 * v[idx] + (1.0 - beta2) * g * g;
            w[idx] -= cfg.lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + eps);
        }
    }
    Ok(result)
}

/// Exhaustive search over the per-coordinate grid `{-delta, ..., +delta}`
/// (`grid_levels` points; a single level means offset 0) around one example,
/// clipped to the pixel box. `L2` threats skip points outside the ball.
/// Returns the first grid point attaining the maximum loss.
pub fn brute_force_worst_case(
    model: &CompositeModel,
    x: &[f64],
    y: usize,
    threat: &ThreatModel,
    grid_levels: usize,
) -> Result<(Vec<f64>, f64), AttackError> {
    brute_force_worst_case_by(model, x, y, threat, grid_levels, cross_entropy_rows)
}

/// [`brute_force_worst_case`] for an arbitrary per-example loss on logits.
pub fn brute_force_worst_case_by(
    model: &CompositeModel,
    x: &[f64],
    y: usize,
    threat: &ThreatModel,
    grid_levels: usize,
    loss_rows: fn(&Tensor, &[usize]) -> Vec<f64>,
) -> Result<(Vec<f64>, f64), AttackError> {
    threat.validate()?;
    let dim = x.len();
    let points = (grid_levels as f64).powi(dim as i32);
    if dim > 6 || grid_levels == 0 || points > 1e6 {
        return Err(AttackError::Guard { dim, levels: grid_levels });
    }
    let [c, h, w] = model.spec().input_shape;
    if c * h * w != dim {
        return Err(ModelError::InputShape {
            expected: [c, h, w],
            got: vec![1, dim],
        }
        .into());
    }
    let loss_of = |batch: Vec<f64>, n: usize| -> Result<Vec<f64>, AttackError> {
        let t = Tensor::new(vec![n, c, h, w], batch).map_err(ModelError::from)?;
        Ok(loss_rows(&model.logits(&t)?, &vec![y; n]))
    };
    if threat.delta == 0.0 {
        let l = loss_of(x.to_vec(), 1)?[0];
        return Ok((x.to_vec(), l));
    }
    let offsets: Vec<f64> = if grid_levels == 1 {
        vec![0.0]
    } else {
        (0..grid_levels)
            .map(|i| -threat.delta + 2.0 * threat.delta * i as f64 / (grid_levels - 1) as f64)
            .collect()
    };
    let (lo, hi) = threat.clip;
    let total = grid_levels.pow(dim as u32);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let chunk = 4096;
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let mut batch = Vec::with_capacity((end - start) * dim);
        let mut kept = Vec::with_capacity(end - start);
        for code in start..end {
            let mut rest = code;
            let point: Vec<f64> = x
                .iter()
                .map(|&xi| {
                    let o = offsets[rest % grid_levels];
                    rest /= grid_levels;
                    (xi + o).clamp(lo, hi)
                })
                .collect();
            if threat.norm == Norm::L2 {
                let n = point.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if n > threat.delta * (1.0 + 1e-12) {
                    continue;
                }
            }
            batch.extend_from_slice(&point);
            kept.push(point);
        }
        if !kept.is_empty() {
            let losses = loss_of(batch, kept.len())?;
            for (p, l) in kept.into_iter().zip(losses) {
                if best.as_ref().is_none_or(|b| l > b.1) {
                    best = Some((p, l));
                }
            }
        }
        start = end;
    }
    Ok(best.expect("the zero offset is always feasible"))
}

/// Evaluation attack selected by name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackPreset {
    Fgsm { threat: ThreatModel },
    Pgd { config: PgdConfig },
    Cw { config: CwConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetFamily {
    Cifar,
    Mnist,
}

pub const PRESET_NAMES: [&str; 4] = ["fgsm", "pgd20", "pgd100", "cw"];

/// Evaluation presets: the CIFAR table, and the intensified MNIST table.
pub fn preset(family: PresetFamily, name: &str) -> Option<AttackPreset> {
    let px = |n: f64| n / 255.0;
    let pgd = |eps: f64, steps: usize| AttackPreset::Pgd {
        config: PgdConfig {
            threat: ThreatModel::linf(px(eps)),
            alpha: px(2.0),
            steps,
            random_start: true,
        },
    };
    let cw = |c: f64| AttackPreset::Cw {
        config: CwConfig {
            c,
            kappa: 0.0,
            steps: 100,
            lr: 0.01,
        },
    };
    Some(match (family, name) {
        (PresetFamily::Cifar, "fgsm") => AttackPreset::Fgsm {
            threat: ThreatModel::linf(px(8.0)),
        },
        (PresetFamily::Cifar, "pgd20") => pgd(8.0, 20),
        (PresetFamily::Cifar, "pgd100") => pgd(10.0, 100),
        (PresetFamily::Cifar, "cw") => cw(1.0),
        (PresetFamily::Mnist, "fgsm") => AttackPreset::Fgsm {
            threat: ThreatModel::linf(px(16.0)),
        },
        (PresetFamily::Mnist, "pgd20") => pgd(32.0, 20),
        (PresetFamily::Mnist, "pgd100") => pgd(64.0, 100),
        (PresetFamily::Mnist, "cw") => cw(2.0),
        _ => return None,
    })
}

/// Training-time PGD: eps 8/255, alpha 2/255, random start, 20 steps.
pub fn train_pgd() -> PgdConfig {
    PgdConfig {
        threat: ThreatModel::linf(8.0 / 255.0),
        alpha: 2.0 / 255.0,
        steps: 20,
        random_start: true,
    }
}

/// [`train_pgd`] shortened to 10 steps for desk-scale runs.
pub fn desk_train_pgd() -> PgdConfig {
    PgdConfig { steps: 10, ..train_pgd() }
}

/// Runs a preset on a batch.
pub fn run_preset(
    model: &CompositeModel,
    x: &Tensor,
    y: &[usize],
    attack: &AttackPreset,
    rng: &mut impl Rng,
) -> Result<Tensor, AttackError> {
    match attack {
        AttackPreset::Fgsm { threat } => fgsm(model, x, y, threat),
        AttackPreset::Pgd { config } => pgd(model, x, y, config, rng),
        AttackPreset::Cw { config } => Ok(cw_l2(model, x, y, config)?.adversarial),
    }
}

/// Mean cross-entropy of a batch.
pub fn mean_loss(model: &CompositeModel, x: &Tensor, y: &[usize]) -> Result<f64, AttackError> {
    let logits = model.logits(x)?;
    let l = cross_entropy_rows(&logits, y);
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}
