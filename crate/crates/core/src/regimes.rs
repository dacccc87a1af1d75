//! Training regimes: ERM, PGD adversarial training, TRADES, the two-phase
//! ignition-then-adversarial schedule, and curriculum adversarial training
//! with patience and rollback.
//!
//! Every epoch draws from its own random streams, keyed by `(seed, epoch,
//! purpose)`, so a phase started from a saved state at epoch `e` replays the
//! same batches and attacks as an uninterrupted run. Evaluation uses separate
//! streams and never perturbs the training trajectory.

use std::time::Instant;

use aetlab_autodiff::{Adam, AdamConfig, AutodiffError, CosineSchedule, ParamStore, Reduction, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, run_preset, trades_perturb, AttackError, AttackPreset, PgdConfig};
use crate::datasets::{augment_batch, AugmentConfig, DataError, Dataset};
use crate::models::{argmax_rows, cross_entropy_rows, CompositeModel, ModelError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("invalid regime: {0}")]
    Spec(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegimeKind {
    Erm {
        epochs: usize,
    },
    At {
        epochs: usize,
    },
    Trades {
        epochs: usize,
        beta: f64,
    },
    /// `t0` ERM epochs, then `t1` adversarial epochs (TRADES when
    /// `trades_beta` is set) from the resulting parameters.
    Aet {
        t0: usize,
        t1: usize,
        #[serde(default)]
        trades_beta: Option<f64>,
    },
    /// Curriculum over attack radii `ladder` (strictly increasing).
    Cat {
        epochs: usize,
        ladder: Vec<f64>,
        patience: usize,
    },
}

impl RegimeKind {
    pub fn budget(&self) -> usize {
        match *self {
            RegimeKind::Erm { epochs } | RegimeKind::At { epochs } | RegimeKind::Trades { epochs, .. } | RegimeKind::Cat { epochs, .. } => {
                epochs
            }
            RegimeKind::Aet { t0, t1, .. } => t0 + t1,
        }
    }

    /// Five evenly spaced radii from 0 to `delta_max`.
    pub fn default_ladder(delta_max: f64) -> Vec<f64> {
        (0..5).map(|k| delta_max * k as f64 / 4.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
    /// Zero the Adam moments when the ignition phase ends.
    #[serde(default)]
    pub reset_moments_at_switch: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            eta_min: 0.0,
            reset_moments_at_switch: false,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub attack: AttackPreset,
    /// Examples of the evaluation set attacked each epoch (0 = all).
    pub robust_subset: usize,
    /// Attack only after the last epoch; earlier reports carry NaN.
    #[serde(default)]
    pub final_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub pgd: PgdConfig,
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    pub eval: EvalSpec,
    /// Cosine horizon; defaults to the regime's own budget.
    #[serde(default)]
    pub schedule_horizon: Option<usize>,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.pgd.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Spec("batch_size must be >= 1".into()));
        }
        match &self.kind {
            RegimeKind::Trades { beta, .. }
            | RegimeKind::Aet {
                trades_beta: Some(beta), ..
            } if !(*beta >= 0.0) => {
                return Err(TrainError::Spec("trades beta must be >= 0".into()));
            }
            RegimeKind::Cat { ladder, patience, .. } => {
                if ladder.is_empty() || *patience == 0 {
                    return Err(TrainError::Spec("cat needs a non-empty ladder and patience >= 1".into()));
                }
                if ladder.windows(2).any(|w| !(w[0] < w[1])) || ladder[0] < 0.0 {
                    return Err(TrainError::Spec("cat ladder must be non-negative and strictly increasing".into()));
                }
            }
            _ => {}
        }
        if let Some(h) = self.schedule_horizon {
            if h < self.kind.budget() {
                return Err(TrainError::Spec("schedule_horizon shorter than the budget".into()));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.schedule_horizon.unwrap_or(self.kind.budget()).max(1)
    }
}

/// What one epoch optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpochObjective {
    Erm,
    At(PgdConfig),
    Trades(PgdConfig, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub wall_seconds: f64,
    #[serde(default)]
    pub stage: Option<usize>,
    #[serde(default)]
    pub val_robust_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollback {
    pub stage: usize,
    /// Epoch (1-based) whose parameters were restored.
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Epoch after which the rollback happened.
    pub at_epoch: usize,
    pub restored: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatState {
    pub stage: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub best_params: ParamStore,
    pub best_adam: Adam,
    pub since_best: usize,
    pub finished: bool,
    pub validation_runs: usize,
    pub rollbacks: Vec<Rollback>,
}

/// `D_t` for one adversarial epoch: the training attack applied by `h_t` to
/// a fixed probe subset, plus the risks needed by the bound.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub epoch: usize,
    pub params: ParamStore,
    pub adversarial: Tensor,
    pub labels: Vec<usize>,
    pub risk: f64,
    /// Risk of this round's hypothesis on the next round's set.
    pub risk_on_next: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: CompositeModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub reports: Vec<EpochReport>,
    pub initial: Option<EvalPoint>,
    pub cat: Option<CatState>,
    /// Parameters after every epoch, when requested.
    pub trajectory: Option<Vec<ParamStore>>,
    pub rounds: Vec<RoundRecord>,
    /// Example-level forward/backward passes, the unit of the virtual clock.
    pub work: u64,
}

impl TrainState {
    pub fn new(model: CompositeModel, optim: &OptimConfig, seed: u64) -> Self {
        let adam = Adam::new(optim.adam(), model.params());
        TrainState {
            model,
            adam,
            epoch: 0,
            seed,
            reports: Vec::new(),
            initial: None,
            cat: None,
            trajectory: None,
            rounds: Vec::new(),
            work: 0,
        }
    }
}

/// Source of the `wall_seconds` column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Clock {
    Wall,
    /// Deterministic: work units times `seconds_per_unit`.
    Virtual {
        seconds_per_unit: f64,
    },
}

impl Default for Clock {
    fn default() -> Self {
        Clock::Virtual { seconds_per_unit: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    pub clock: Clock,
    pub keep_trajectory: bool,
    /// Probe-set size for round records (0 disables them).
    pub trace_probe: usize,
    pub eval_initial: bool,
    /// Pause once this many epochs are complete; a later `run_from`
    /// continues exactly where the paused run left off.
    pub stop_at: Option<usize>,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Shuffle = 0,
    Augment = 1,
    Attack = 2,
    Eval = 3,
    Validate = 4,
    Probe = 5,
}

/// Independent stream for `(seed, epoch, purpose)`.
fn stream(seed: u64, epoch: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose as u64);
    rng
}

pub struct Trainer<'a> {
    pub spec: &'a RegimeSpec,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    /// CAT validation set; defaults to `eval`.
    pub val: Option<&'a Dataset>,
    pub options: TrainOptions,
    schedule: CosineSchedule,
    probe: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a RegimeSpec, train: &'a Dataset, eval: &'a Dataset, options: TrainOptions) -> Result<Self, TrainError> {
        spec.validate()?;
        if train.is_empty() || eval.is_empty() {
            return Err(TrainError::Spec("train and eval sets must be non-empty".into()));
        }
        let schedule = CosineSchedule::new(spec.optim.lr, spec.optim.eta_min, spec.horizon())?;
        Ok(Trainer {
            spec,
            train,
            eval,
            val: None,
            options,
            schedule,
            probe: Vec::new(),
        })
    }

    pub fn with_validation(mut self, val: &'a Dataset) -> Self {
        self.val = Some(val);
        self
    }

    /// Fresh state from the model's initial parameters.
    pub fn init_state(&self, model: CompositeModel, seed: u64) -> TrainState {
        let mut state = TrainState::new(model, &self.spec.optim, seed);
        if self.options.keep_trajectory {
            state.trajectory = Some(Vec::new());
        }
        state
    }

    /// Runs the whole regime from a fresh state.
    pub fn run(&mut self, model: CompositeModel, seed: u64) -> Result<TrainState, TrainError> {
        let mut state = self.init_state(model, seed);
        self.run_from(&mut state)?;
        Ok(state)
    }

    /// Runs the regime's epochs starting at `state.epoch`; a regime with
    /// budget `B` stops once `B` epochs have been completed in total. For
    /// the two-phase regime, the phase of each epoch follows from its index.
    pub fn run_from(&mut self, state: &mut TrainState) -> Result<(), TrainError> {
        if self.options.eval_initial && state.epoch == 0 && state.initial.is_none() {
            state.initial = Some(self.evaluate(state, 0)?);
        }
        if self.options.trace_probe > 0 && self.probe.is_empty() {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            idx.shuffle(&mut stream(state.seed, 0, Purpose::Probe));
            idx.truncate(self.options.trace_probe);
            self.probe = idx;
        }
        let spec = self.spec;
        let budget = spec.kind.budget();
        match spec.kind {
            RegimeKind::Erm { .. } => self.run_phase(state, EpochObjective::Erm, budget, "erm"),
            RegimeKind::At { .. } => self.run_phase(state, EpochObjective::At(spec.pgd), budget, "adversarial"),
            RegimeKind::Trades { beta, .. } => self.run_phase(state, EpochObjective::Trades(spec.pgd, beta), budget, "trades"),
            RegimeKind::Aet { t0, t1, trades_beta } => {
                self.run_phase(state, EpochObjective::Erm, t0, "ignition")?;
                if state.epoch == t0 && t1 > 0 && spec.optim.reset_moments_at_switch {
                    state.adam.reset();
                }
                let second = match trades_beta {
                    Some(beta) => EpochObjective::Trades(spec.pgd, beta),
                    None => EpochObjective::At(spec.pgd),
                };
                self.run_phase(state, second, t0 + t1, "adversarial")
            }
            RegimeKind::Cat { .. } => self.run_cat(state),
        }
    }

    /// Trains with `objective` until `until` epochs are complete.
    pub fn run_phase(&self, state: &mut TrainState, objective: EpochObjective, until: usize, label: &str) -> Result<(), TrainError> {
        let until = self.options.stop_at.map_or(until, |s| s.min(until));
        while state.epoch < until {
            let started = Instant::now();
            let work_before = state.work;
            let (loss, lr) = self.train_epoch(state, objective)?;
            if matches!(objective, EpochObjective::At(_) | EpochObjective::Trades(..)) {
                self.record_round(state)?;
            }
            let robust = !self.spec.eval.final_only || state.epoch == self.spec.kind.budget();
            let point = self.evaluate_with(state, state.epoch, robust)?;
            let wall_seconds = self.elapsed(started, state.work - work_before);
            state.reports.push(EpochReport {
                epoch: state.epoch,
                phase: label.to_string(),
                lr,
                train_loss: loss,
                clean_acc: point.clean_acc,
                robust_acc: point.robust_acc,
                wall_seconds,
                stage: None,
                val_robust_acc: None,
            });
        }
        Ok(())
    }

    fn elapsed(&self, started: Instant, work: u64) -> f64 {
        match self.options.clock {
            Clock::Wall => started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
            Clock::Virtual { seconds_per_unit } => (work.max(1)) as f64 * seconds_per_unit,
        }
    }

    /// One pass over shuffled batches. Returns the example-weighted mean
    /// training loss and the learning rate used.
    pub fn train_epoch(&self, state: &mut TrainState, objective: EpochObjective) -> Result<(f64, f64), TrainError> {
        let epoch = state.epoch;
        let lr = self.schedule.lr(epoch)?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(state.seed, epoch, Purpose::Shuffle));
        let mut aug_rng = stream(state.seed, epoch, Purpose::Augment);
        let mut attack_rng = stream(state.seed, epoch, Purpose::Attack);

        let mut total = 0.0;
        for (batch_index, idx) in order.chunks(self.spec.batch_size).enumerate() {
            let mut x = self.train.batch(idx);
            if let Some(cfg) = &self.spec.augment {
                x = augment_batch(&x, cfg, &mut aug_rng)?;
            }
            let y = self.train.batch_labels(idx);
            let b = idx.len() as u64;
            let loss = match objective {
                EpochObjective::Erm => {
                    state.work += b;
                    self.step(state, &x, None, &y, 0.0, lr)?
                }
                EpochObjective::At(cfg) => {
                    let adv = pgd(&state.model, &x, &y, &cfg, &mut attack_rng)?;
                    state.work += b * (1 + if cfg.threat.delta > 0.0 { cfg.steps as u64 } else { 0 });
                    self.step(state, &adv, None, &y, 0.0, lr)?
                }
                EpochObjective::Trades(cfg, beta) => {
                    if beta == 0.0 {
                        state.work += b;
                        self.step(state, &x, None, &y, 0.0, lr)?
                    } else {
                        let adv = trades_perturb(&state.model, &x, &cfg, &mut attack_rng)?;
                        state.work += b * (2 + if cfg.threat.delta > 0.0 { cfg.steps as u64 } else { 0 });
                        self.step(state, &x, Some(&adv), &y, beta, lr)?
                    }
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_index,
                    loss,
                });
            }
            total += loss * idx.len() as f64;
        }
        state.epoch += 1;
        if let Some(t) = state.trajectory.as_mut() {
            t.push(state.model.params().clone());
        }
        Ok((total / self.train.len() as f64, lr))
    }

    /// Mean cross-entropy on `x` (plus `beta * KL(h(x) || h(adv))` when a
    /// TRADES partner batch is given), then one Adam update.
    fn step(&self, state: &mut TrainState, x: &Tensor, adv: Option<&Tensor>, y: &[usize], beta: f64, lr: f64) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let bound = state.model.bind(&mut tape, true);
        let xv = tape.input(x.clone(), false);
        let (_, logits) = state.model.record(&mut tape, &bound, xv)?;
        let ce = tape.softmax_cross_entropy(logits, y, Reduction::Mean)?;
        let loss = match adv {
            None => ce,
            Some(adv) => {
                let av = tape.input(adv.clone(), false);
                let (_, adv_logits) = state.model.record(&mut tape, &bound, av)?;
                let kl = tape.kl_divergence(logits, adv_logits, Reduction::Mean)?;
                let kl = tape.scale(kl, beta)?;
                tape.add(ce, kl)?
            }
        };
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        state.adam.step(state.model.params_mut(), &grads, lr)?;
        Ok(value)
    }

    /// Clean accuracy on the whole evaluation set and robust accuracy on its
    /// first `robust_subset` examples under the evaluation attack.
    pub fn evaluate(&self, state: &mut TrainState, epoch: usize) -> Result<EvalPoint, TrainError> {
        self.evaluate_with(state, epoch, true)
    }

    fn evaluate_with(&self, state: &mut TrainState, epoch: usize, robust: bool) -> Result<EvalPoint, TrainError> {
        let clean_acc = accuracy(&state.model, self.eval, self.eval.len())?;
        state.work += self.eval.len() as u64;
        if !robust {
            return Ok(EvalPoint {
                clean_acc,
                robust_acc: f64::NAN,
            });
        }
        let n = match self.spec.eval.robust_subset {
            0 => self.eval.len(),
            k => k.min(self.eval.len()),
        };
        let mut rng = stream(state.seed, epoch, Purpose::Eval);
        let robust_acc = robust_accuracy(&state.model, self.eval, n, &self.spec.eval.attack, &mut rng)?;
        state.work += n as u64 * attack_cost(&self.spec.eval.attack);
        Ok(EvalPoint { clean_acc, robust_acc })
    }

    fn record_round(&self, state: &mut TrainState) -> Result<(), TrainError> {
        if self.probe.is_empty() {
            return Ok(());
        }
        let x = self.train.batch(&self.probe);
        let y = self.train.batch_labels(&self.probe);
        let mut rng = stream(state.seed, state.epoch, Purpose::Probe);
        let adv = pgd(&state.model, &x, &y, &self.spec.pgd, &mut rng)?;
        let risk = mean(&cross_entropy_rows(&state.model.logits(&adv)?, &y));
        if let Some(prev) = state.rounds.last_mut() {
            let h_prev = CompositeModel::from_params(state.model.spec().clone(), prev.params.clone())?;
            prev.risk_on_next = Some(mean(&cross_entropy_rows(&h_prev.logits(&adv)?, &y)));
        }
        state.rounds.push(RoundRecord {
            epoch: state.epoch,
            params: state.model.params().clone(),
            adversarial: adv,
            labels: y,
            risk,
            risk_on_next: None,
        });
        Ok(())
    }

    /// Curriculum: train at radius `ladder[k]`; after each epoch measure
    /// validation robust accuracy at that radius; after `patience` epochs
    /// without a strict improvement, restore the stage-best parameters and
    /// optimizer state and move to the next radius. Stops at the budget or
    /// when the last stage runs out of patience.
    pub fn run_cat(&self, state: &mut TrainState) -> Result<(), TrainError> {
        let RegimeKind::Cat {
            epochs,
            ref ladder,
            patience,
        } = self.spec.kind
        else {
            return Err(TrainError::Spec("run_cat needs a cat regime".into()));
        };
        let val = self.val.unwrap_or(self.eval);
        if state.cat.is_none() {
            state.cat = Some(CatState {
                stage: 0,
                best_metric: f64::NEG_INFINITY,
                best_epoch: state.epoch,
                best_params: state.model.params().clone(),
                best_adam: state.adam.clone(),
                since_best: 0,
                finished: false,
                validation_runs: 0,
                rollbacks: Vec::new(),
            });
        }
        let epochs_now = self.options.stop_at.map_or(epochs, |s| s.min(epochs));
        while state.epoch < epochs_now && !state.cat.as_ref().is_some_and(|c| c.finished) {
            let started = Instant::now();
            let work_before = state.work;
            let stage = state.cat.as_ref().map_or(0, |c| c.stage);
            let cfg = self.spec.pgd.with_delta(ladder[stage]);
            let (loss, lr) = self.train_epoch(state, EpochObjective::At(cfg))?;
            if cfg.threat.delta > 0.0 {
                self.record_round(state)?;
            }

            let mut rng = stream(state.seed, state.epoch, Purpose::Validate);
            let val_acc = robust_accuracy(&state.model, val, val.len(), &AttackPreset::Pgd { config: cfg }, &mut rng)?;
            state.work += val.len() as u64 * (1 + cfg.steps as u64);
            let cat = state.cat.as_mut().expect("cat state");
            cat.validation_runs += 1;
            if val_acc > cat.best_metric {
                cat.best_metric = val_acc;
                cat.best_epoch = state.epoch;
                cat.best_params = state.model.params().clone();
                cat.best_adam = state.adam.clone();
                cat.since_best = 0;
            } else {
                cat.since_best += 1;
            }
            let last = state.epoch == epochs || (cat.since_best >= patience && stage + 1 == ladder.len());
            let robust = !self.spec.eval.final_only || last;
            let point = self.evaluate_with(state, state.epoch, robust)?;
            let cat = state.cat.as_mut().expect("cat state");
            let wall_seconds = self.elapsed(started, state.work - work_before);
            state.reports.push(EpochReport {
                epoch: state.epoch,
                phase: format!("cat-{stage}"),
                lr,
                train_loss: loss,
                clean_acc: point.clean_acc,
                robust_acc: point.robust_acc,
                wall_seconds,
                stage: Some(stage),
                val_robust_acc: Some(val_acc),
            });

            if cat.since_best >= patience {
                state.model.set_params(cat.best_params.clone())?;
                state.adam = cat.best_adam.clone();
                cat.rollbacks.push(Rollback {
                    stage,
                    best_epoch: cat.best_epoch,
                    best_metric: cat.best_metric,
                    at_epoch: state.epoch,
                    restored: cat.best_params.clone(),
                });
                if stage + 1 < ladder.len() {
                    cat.stage += 1;
                    cat.best_metric = f64::NEG_INFINITY;
                    cat.since_best = 0;
                } else {
                    cat.finished = true;
                }
            }
        }
        Ok(())
    }
}

fn attack_cost(attack: &AttackPreset) -> u64 {
    match attack {
        AttackPreset::Fgsm { .. } => 2,
        AttackPreset::Pgd { config } => 1 + config.steps as u64,
        AttackPreset::Cw { config } => 1 + config.steps as u64,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

const EVAL_BATCH: usize = 250;

/// Percentage of the first `n` examples classified correctly.
pub fn accuracy(model: &CompositeModel, data: &Dataset, n: usize) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let pred = argmax_rows(&model.logits(&data.batch(chunk))?);
        correct += pred.iter().zip(data.batch_labels(chunk)).filter(|(p, y)| **p == *y).count();
    }
    Ok(100.0 * correct as f64 / idx.len().max(1) as f64)
}

/// Percentage of the first `n` examples still classified correctly after
/// the attack.
pub fn robust_accuracy(
    model: &CompositeModel,
    data: &Dataset,
    n: usize,
    attack: &AttackPreset,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = (data.batch(chunk), data.batch_labels(chunk));
        let adv = run_preset(model, &x, &y, attack, rng)?;
        let pred = argmax_rows(&model.logits(&adv)?);
        correct += pred.iter().zip(&y).filter(|(p, y)| *p == *y).count();
    }
    Ok(100.0 * correct as f64 / idx.len().max(1) as f64)
}
