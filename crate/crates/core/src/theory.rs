//! Quantities of the drift-based generalization bound: natural and
//! adversarial risk, the instance metric on `X x Y`, Wasserstein-1 between
//! empirical sets, empirical Rademacher complexity, bound assembly over a
//! recorded trace, and detection of the post-ignition jump in robustness.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{brute_force_worst_case_by, pgd_restarts, AttackError, Norm, PgdConfig, ThreatModel};
use crate::datasets::Dataset;
use crate::models::{argmax_rows, cross_entropy_rows, CompositeModel, ModelError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("exact W1 needs uniform weights and equal sizes <= {max}, got {p} vs {q}")]
    ExactSize { p: usize, q: usize, max: usize },
    #[error("transport LP failed: {0}")]
    Lp(String),
    #[error("window [{start}, {end}) outside series of length {len}")]
    Window { start: usize, end: usize, len: usize },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    ZeroOne,
}

fn loss_rows(kind: LossKind) -> fn(&aetlab_autodiff::Tensor, &[usize]) -> Vec<f64> {
    match kind {
        LossKind::CrossEntropy => cross_entropy_rows,
        LossKind::ZeroOne => |logits, labels| {
            argmax_rows(logits)
                .iter()
                .zip(labels)
                .map(|(p, y)| if p == y { 0.0 } else { 1.0 })
                .collect()
        },
    }
}

const EVAL_CHUNK: usize = 256;

fn chunked_mean(data: &Dataset, mut f: impl FnMut(&[usize]) -> Result<Vec<f64>, TheoryError>) -> Result<f64, TheoryError> {
    if data.is_empty() {
        return Err(TheoryError::Invalid("empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        total += f(chunk)?.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Mean loss over the dataset.
pub fn nat_risk(model: &CompositeModel, data: &Dataset, loss: LossKind) -> Result<f64, TheoryError> {
    let rows = loss_rows(loss);
    chunked_mean(data, |chunk| {
        let logits = model.logits(&data.batch(chunk))?;
        Ok(rows(&logits, &data.batch_labels(chunk)))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RiskAttack {
    Pgd { config: PgdConfig, restarts: usize, seed: u64 },
    Brute { threat: ThreatModel, grid_levels: usize },
}

/// Whether the inner maximum was solved exactly or only bounded below.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMax {
    Exact,
    PgdLowerBound,
}

/// Mean attacked loss. The brute-force path maximizes the requested loss
/// itself; PGD maximizes cross-entropy and reports the requested loss at
/// its output.
pub fn adv_risk(model: &CompositeModel, data: &Dataset, loss: LossKind, attack: &RiskAttack) -> Result<(f64, InnerMax), TheoryError> {
    let rows = loss_rows(loss);
    match *attack {
        RiskAttack::Pgd { config, restarts, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = chunked_mean(data, |chunk| {
                let (x, y) = (data.batch(chunk), data.batch_labels(chunk));
                let adv = pgd_restarts(model, &x, &y, &config, restarts, &mut rng)?;
                Ok(rows(&model.logits(&adv)?, &y))
            })?;
            Ok((r, InnerMax::PgdLowerBound))
        }
        RiskAttack::Brute { threat, grid_levels } => {
            let mut total = 0.0;
            for i in 0..data.len() {
                total += brute_force_worst_case_by(model, data.image(i), data.labels()[i], &threat, grid_levels, rows)?.1;
            }
            if data.is_empty() {
                return Err(TheoryError::Invalid("empty dataset".into()));
            }
            Ok((total / data.len() as f64, InnerMax::Exact))
        }
    }
}

/// `d((x, y), (x', y')) = ||x - x'||_p + c |y - y'|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMetric {
    pub p: Norm,
    pub c: f64,
}

impl InstanceMetric {
    pub fn eval(&self, a: &Sample, b: &Sample) -> f64 {
        instance_metric(&a.x, a.y, &b.x, b.y, self.p, self.c)
    }
}

pub fn instance_metric(x: &[f64], y: f64, x2: &[f64], y2: f64, p: Norm, c: f64) -> f64 {
    let dx = match p {
        Norm::Linf => x.iter().zip(x2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
        Norm::L2 => x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
    };
    dx + c * (y - y2).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Input,
    Feature,
}

/// Finite distribution on `Z`; `weights == None` means uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    pub points: Vec<Sample>,
    pub weights: Option<Vec<f64>>,
    pub space: Space,
}

impl EmpiricalDistribution {
    pub fn uniform(points: Vec<Sample>, space: Space) -> Self {
        EmpiricalDistribution {
            points,
            weights: None,
            space,
        }
    }

    pub fn weighted(points: Vec<Sample>, weights: Vec<f64>, space: Space) -> Result<Self, TheoryError> {
        let d = EmpiricalDistribution {
            points,
            weights: Some(weights),
            space,
        };
        d.validate()?;
        Ok(d)
    }

    /// Pairs the rows of an `[n, ...]` tensor with integer labels.
    pub fn from_rows(rows: &aetlab_autodiff::Tensor, labels: &[usize], space: Space) -> Self {
        let n = rows.shape()[0];
        let per = rows.numel() / n.max(1);
        let points = rows
            .data()
            .chunks_exact(per)
            .zip(labels)
            .map(|(x, &y)| Sample {
                x: x.to_vec(),
                y: y as f64,
            })
            .collect();
        Self::uniform(points, space)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.len() as f64; self.len()],
        }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.points.is_empty() {
            return Err(TheoryError::Invalid("empty distribution".into()));
        }
        let dim = self.points[0].x.len();
        if self.points.iter().any(|p| p.x.len() != dim) {
            return Err(TheoryError::Invalid("points differ in dimension".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.points.len() || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(TheoryError::Invalid("weights must be non-negative, one per point".into()));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(TheoryError::Invalid("weights must sum to 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum W1Mode {
    /// Minimum-cost assignment for uniform equal-size sets.
    Exact,
    /// Transport linear program; any weights, tiny sizes.
    Lp,
    /// Mean 1-D distance over random projections of `[x, c * y]`.
    Sliced { projections: usize, seed: u64 },
}

pub const EXACT_MAX: usize = 512;
pub const LP_MAX: usize = 64;

pub fn cost_matrix(p: &EmpiricalDistribution, q: &EmpiricalDistribution, metric: &InstanceMetric) -> Vec<Vec<f64>> {
    p.points
        .iter()
        .map(|a| q.points.iter().map(|b| metric.eval(a, b)).collect())
        .collect()
}

pub fn w1(p: &EmpiricalDistribution, q: &EmpiricalDistribution, metric: &InstanceMetric, mode: W1Mode) -> Result<f64, TheoryError> {
    p.validate()?;
    q.validate()?;
    if p.points[0].x.len() != q.points[0].x.len() {
        return Err(TheoryError::Invalid("P and Q differ in dimension".into()));
    }
    match mode {
        W1Mode::Exact => {
            if p.weights.is_some() || q.weights.is_some() || p.len() != q.len() || p.len() > EXACT_MAX {
                return Err(TheoryError::ExactSize {
                    p: p.len(),
                    q: q.len(),
                    max: EXACT_MAX,
                });
            }
            let cost = cost_matrix(p, q, metric);
            let (total, _) = min_cost_assignment(&cost);
            Ok(total / p.len() as f64)
        }
        W1Mode::Lp => {
            if p.len() > LP_MAX || q.len() > LP_MAX {
                return Err(TheoryError::ExactSize {
                    p: p.len(),
                    q: q.len(),
                    max: LP_MAX,
                });
            }
            transport_lp(&p.mass(), &q.mass(), &cost_matrix(p, q, metric))
        }
        W1Mode::Sliced { projections, seed } => {
            if projections == 0 {
                return Err(TheoryError::Invalid("sliced W1 needs >= 1 projection".into()));
            }
            let dim = p.points[0].x.len() + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs: Vec<Vec<f64>> = (0..projections)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
                    v.into_iter().map(|t| t / n).collect()
                })
                .collect();
            sliced_w1(p, q, metric.c, &dirs)
        }
    }
}

/// Sliced W1 along explicit unit directions in `[x, c * y]` space.
pub fn sliced_w1(p: &EmpiricalDistribution, q: &EmpiricalDistribution, c: f64, dirs: &[Vec<f64>]) -> Result<f64, TheoryError> {
    if dirs.is_empty() {
        return Err(TheoryError::Invalid("no projection directions".into()));
    }
    let project = |d: &EmpiricalDistribution, u: &[f64]| -> Vec<f64> {
        d.points
            .iter()
            .map(|s| s.x.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + c * s.y * u[s.x.len()])
            .collect()
    };
    let (pm, qm) = (p.mass(), q.mass());
    let total: f64 = dirs.iter().map(|u| w1_line(&project(p, u), &pm, &project(q, u), &qm)).sum();
    Ok(total / dirs.len() as f64)
}

/// W1 on the real line: the integral of `|F_P - F_Q|`.
pub fn w1_line(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = a.iter().zip(wa).map(|(&x, &w)| (x, w)).collect();
    events.extend(b.iter().zip(wb).map(|(&x, &w)| (x, -w)));
    events.sort_by(|l, r| l.0.total_cmp(&r.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        total += diff.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Hungarian algorithm with potentials (shortest augmenting paths) on a
/// square cost matrix. Returns the total cost and `assignment[row] = col`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut owner = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (total, assignment)
}

/// `min <C, gamma>` over couplings of `a` and `b`.
pub fn transport_lp(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<f64, TheoryError> {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = cost
        .iter()
        .map(|row| row.iter().map(|&c| lp.add_var(c, (0.0, f64::INFINITY))).collect())
        .collect();
    for (i, &mass) in a.iter().enumerate() {
        lp.add_constraint(vars[i].iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, mass);
    }
    // The last column constraint is implied by the others.
    for (j, &mass) in b.iter().enumerate().take(b.len().saturating_sub(1)) {
        lp.add_constraint(vars.iter().map(|row| (row[j], 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, mass);
    }
    let solution = lp.solve().map_err(|e| TheoryError::Lp(e.to_string()))?;
    Ok(solution.objective())
}

/// Function class for the empirical Rademacher complexity, given by its
/// values on the fixed sample `z_1..z_n`.
pub enum FunctionClass<'a> {
    /// One row per function: `f(z_1), ..., f(z_n)`.
    Finite(Vec<Vec<f64>>),
    /// `sup_f sum_i sigma_i f(z_i)` computed by the caller.
    Oracle { n: usize, sup: Box<dyn Fn(&[f64]) -> f64 + 'a> },
}

impl FunctionClass<'_> {
    fn n(&self) -> Result<usize, TheoryError> {
        match self {
            FunctionClass::Finite(rows) => {
                let n = rows
                    .first()
                    .ok_or_else(|| TheoryError::Invalid("empty function class".into()))?
                    .len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(TheoryError::Invalid("function values must share a positive length".into()));
                }
                Ok(n)
            }
            FunctionClass::Oracle { n, .. } if *n > 0 => Ok(*n),
            FunctionClass::Oracle { .. } => Err(TheoryError::Invalid("empty sample".into())),
        }
    }

    /// `sup_f (1/n) sum_i sigma_i f(z_i)`.
    fn sup(&self, sigma: &[f64]) -> f64 {
        let n = sigma.len() as f64;
        match self {
            FunctionClass::Finite(rows) => rows
                .iter()
                .map(|r| r.iter().zip(sigma).map(|(f, s)| f * s).sum::<f64>() / n)
                .fold(f64::NEG_INFINITY, f64::max),
            FunctionClass::Oracle { sup, .. } => sup(sigma) / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub mean: f64,
    /// Standard error of the mean; 0 for exhaustive enumeration.
    pub stderr: f64,
    pub draws: usize,
    pub exact: bool,
}

pub fn rademacher_mc(class: &FunctionClass, m_draws: usize, seed: u64) -> Result<RademacherEstimate, TheoryError> {
    let n = class.n()?;
    if m_draws == 0 {
        return Err(TheoryError::Invalid("m_draws must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..m_draws)
        .map(|_| {
            let sigma: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            class.sup(&sigma)
        })
        .collect();
    let m = m_draws as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = if m_draws > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(RademacherEstimate {
        mean,
        stderr: (var / m).sqrt(),
        draws: m_draws,
        exact: false,
    })
}

pub const ENUMERATION_MAX: usize = 20;

/// Exact expectation by enumerating all `2^n` sign vectors.
pub fn rademacher_exact(class: &FunctionClass) -> Result<RademacherEstimate, TheoryError> {
    let n = class.n()?;
    if n > ENUMERATION_MAX {
        return Err(TheoryError::Invalid(format!("enumeration limited to n <= {ENUMERATION_MAX}")));
    }
    let count = 1usize << n;
    let total: f64 = (0..count)
        .map(|code| {
            let sigma: Vec<f64> = (0..n).map(|i| if code >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            class.sup(&sigma)
        })
        .sum();
    Ok(RademacherEstimate {
        mean: total / count as f64,
        stderr: 0.0,
        draws: count,
        exact: true,
    })
}

/// One adversarial round: the empirical risk of `h_t` on its own set `D_t`,
/// optionally the risk of `h_t` on the next round's set, and `D_t` itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub risk: f64,
    #[serde(default)]
    pub risk_on_next: Option<f64>,
    pub set: EmpiricalDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub rounds: Vec<Round>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Lipschitz constant of the loss in its prediction argument.
    pub rho: f64,
    /// Bound on the loss; multiplies the statistical term when
    /// `scale_stat_by_m` is set.
    pub m: f64,
    /// Lipschitz constant of the loss in the input.
    pub l: f64,
    #[serde(default)]
    pub scale_stat_by_m: bool,
}

impl LossSpec {
    fn validate(&self) -> Result<(), TheoryError> {
        if !(self.rho > 0.0 && self.m > 0.0 && self.l > 0.0) {
            return Err(TheoryError::Invalid("rho, M and L must be positive".into()));
        }
        Ok(())
    }
}

/// Per-transition check of `|R_t(h_t) - R_{t+1}(h_t)| <= L * W1(D_t, D_{t+1})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub round: usize,
    pub risk_change: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rounds: usize,
    pub n: usize,
    pub delta_conf: f64,
    pub w1_mode: W1Mode,
    pub avg_empirical_risk: f64,
    pub pairwise_w1: Vec<f64>,
    pub drift_sum: f64,
    pub l_used: f64,
    pub drift_term: f64,
    /// Constant in front of `sqrt(ln(1/delta_conf) / n)`.
    pub stat_multiplier: f64,
    pub stat_term: f64,
    pub total: f64,
    /// Whether the last round's risk is at most the average risk.
    pub eq12_flag: bool,
    pub telescoping_residual: f64,
    pub telescoping_holds: bool,
    /// Present for transitions whose trace carries `risk_on_next`.
    pub drift_checks: Vec<DriftCheck>,
}

pub const TELESCOPING_TOL: f64 = 1e-12;
pub const DRIFT_SLACK: f64 = 1e-12;

pub fn bound_assemble(
    trace: &RoundTrace,
    loss: &LossSpec,
    metric: &InstanceMetric,
    delta_conf: f64,
    n: usize,
    mode: W1Mode,
) -> Result<BoundReport, TheoryError> {
    loss.validate()?;
    let t = trace.rounds.len();
    if t == 0 {
        return Err(TheoryError::Invalid("trace has no rounds".into()));
    }
    if !(delta_conf > 0.0 && delta_conf < 1.0) || n == 0 {
        return Err(TheoryError::Invalid("need 0 < delta_conf < 1 and n >= 1".into()));
    }
    let risks: Vec<f64> = trace.rounds.iter().map(|r| r.risk).collect();
    let avg_empirical_risk = risks.iter().sum::<f64>() / t as f64;

    let pairwise_w1 = trace
        .rounds
        .windows(2)
        .map(|w| w1(&w[0].set, &w[1].set, metric, mode))
        .collect::<Result<Vec<f64>, _>>()?;
    let drift_sum: f64 = pairwise_w1.iter().sum();
    let drift_term = loss.l / t as f64 * drift_sum;

    let stat_multiplier = if loss.scale_stat_by_m { loss.m } else { 1.0 };
    let stat_term = stat_multiplier * ((1.0 / delta_conf).ln() / n as f64).sqrt();
    let total = avg_empirical_risk + drift_term + stat_term;

    let telescoped = risks[0] + risks.windows(2).map(|w| w[1] - w[0]).sum::<f64>();
    let telescoping_residual = (telescoped - risks[t - 1]).abs();

    let drift_checks = trace
        .rounds
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            w[0].risk_on_next.map(|next| {
                let risk_change = (w[0].risk - next).abs();
                let bound = loss.l * pairwise_w1[i];
                DriftCheck {
                    round: i + 1,
                    risk_change,
                    bound,
                    holds: risk_change <= bound + DRIFT_SLACK,
                }
            })
        })
        .collect();

    Ok(BoundReport {
        rounds: t,
        n,
        delta_conf,
        w1_mode: mode,
        avg_empirical_risk,
        pairwise_w1,
        drift_sum,
        l_used: loss.l,
        drift_term,
        stat_multiplier,
        stat_term,
        total,
        eq12_flag: risks[t - 1] <= avg_empirical_risk,
        telescoping_residual,
        telescoping_holds: telescoping_residual <= TELESCOPING_TOL,
        drift_checks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagicPhase {
    pub peak_gain: f64,
    /// Series index at which the peak gain was reached.
    pub peak_epoch: usize,
    pub detected: bool,
}

pub const MAGIC_THRESHOLD: f64 = 5.0;

/// Largest one-step increase `series[e] - series[e - 1]` for `e` in
/// `switch .. switch + window`; detected when it exceeds `threshold`.
pub fn magic_phase_detect(series: &[f64], switch: usize, window: usize, threshold: f64) -> Result<MagicPhase, TheoryError> {
    if switch == 0 || window == 0 || switch + window > series.len() {
        return Err(TheoryError::Window {
            start: switch,
            end: switch + window,
            len: series.len(),
        });
    }
    let (peak_epoch, peak_gain) = (switch..switch + window)
        .map(|e| (e, series[e] - series[e - 1]))
        .fold((switch, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    let peak_gain = peak_gain.max(0.0);
    Ok(MagicPhase {
        peak_gain,
        peak_epoch,
        detected: peak_gain > threshold,
    })
}
