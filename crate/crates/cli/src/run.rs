//! `train` and `evaluate`: one directory per seed holding the per-epoch
//! CSV, checkpoints, the round trace and a completion summary.

use std::fs;
use std::path::{Path, PathBuf};

use aetlab_autodiff::{ParamStore, Tensor};
use aetlab_core::models::CompositeModel;
use aetlab_core::regimes::{accuracy, robust_accuracy, EpochReport, EvalPoint, RoundRecord, TrainState, Trainer};
use aetlab_core::theory::{EmpiricalDistribution, Round, RoundTrace, Space};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{named_eval_attack, ExperimentConfig, Prepared};
use crate::{read_json, write_json, CliError};

pub const CSV_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.json";
pub const INITIAL_FILE: &str = "initial.json";
pub const SUMMARY_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn periodic_checkpoint(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// One CSV row; an unmeasured robust accuracy is left blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub wall_seconds: f64,
}

impl From<&EpochReport> for CsvRow {
    fn from(r: &EpochReport) -> Self {
        CsvRow {
            epoch: r.epoch,
            phase: r.phase.clone(),
            lr: r.lr,
            train_loss: r.train_loss,
            clean_acc: r.clean_acc,
            robust_acc: (!r.robust_acc.is_nan()).then_some(r.robust_acc),
            wall_seconds: r.wall_seconds,
        }
    }
}

impl From<CsvRow> for EpochReport {
    fn from(r: CsvRow) -> Self {
        EpochReport {
            epoch: r.epoch,
            phase: r.phase,
            lr: r.lr,
            train_loss: r.train_loss,
            clean_acc: r.clean_acc,
            robust_acc: r.robust_acc.unwrap_or(f64::NAN),
            wall_seconds: r.wall_seconds,
            stage: None,
            val_robust_acc: None,
        }
    }
}

pub const CSV_HEADER: &str = "epoch,phase,lr,train_loss,clean_acc,robust_acc,wall_seconds\n";

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(CSV_HEADER.as_bytes().to_vec());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::artifact(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::artifact(path, e))?;
    crate::write_file(path, &bytes)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::artifact(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::artifact(path, e))
}

/// Clean and (possibly unmeasured) robust accuracy before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredEval {
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

impl From<EvalPoint> for StoredEval {
    fn from(p: EvalPoint) -> Self {
        StoredEval {
            clean_acc: p.clean_acc,
            robust_acc: (!p.robust_acc.is_nan()).then_some(p.robust_acc),
        }
    }
}

impl From<StoredEval> for EvalPoint {
    fn from(s: StoredEval) -> Self {
        EvalPoint {
            clean_acc: s.clean_acc,
            robust_acc: s.robust_acc.unwrap_or(f64::NAN),
        }
    }
}

/// Recorded adversarial rounds: each round's probe set after the attack,
/// with the epoch that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTrace {
    pub input_shape: [usize; 3],
    /// Size of the training set, the sample size of the statistical term.
    pub n_train: usize,
    pub round_epochs: Vec<usize>,
    pub trace: RoundTrace,
}

impl StoredTrace {
    pub fn of(state: &TrainState, n_train: usize) -> Self {
        let rounds = state
            .rounds
            .iter()
            .map(|r| Round {
                risk: r.risk,
                risk_on_next: r.risk_on_next,
                set: EmpiricalDistribution::from_rows(&r.adversarial, &r.labels, Space::Input),
            })
            .collect();
        StoredTrace {
            input_shape: state.model.spec().input_shape,
            n_train,
            round_epochs: state.rounds.iter().map(|r| r.epoch).collect(),
            trace: RoundTrace { rounds },
        }
    }

    /// Round records up to `epoch`, as they stood when that epoch ended.
    /// Parameters are left empty; only the last round's matter and those
    /// come from the checkpoint.
    pub fn records_until(&self, epoch: usize) -> Result<Vec<RoundRecord>, CliError> {
        let mut out = Vec::new();
        for (round, &e) in self.trace.rounds.iter().zip(&self.round_epochs) {
            if e > epoch {
                break;
            }
            let n = round.set.len();
            let mut shape = vec![n];
            shape.extend(self.input_shape);
            let data = round.set.points.iter().flat_map(|p| p.x.iter().copied()).collect();
            let adversarial = Tensor::new(shape, data).map_err(|e| CliError::Checkpoint(format!("trace round {e}")))?;
            out.push(RoundRecord {
                epoch: e,
                params: ParamStore::new(),
                adversarial,
                labels: round.set.points.iter().map(|p| p.y as usize).collect(),
                risk: round.risk,
                risk_on_next: round.risk_on_next,
            });
        }
        if out.len() < self.trace.rounds.len() {
            if let Some(last) = out.last_mut() {
                last.risk_on_next = None;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatSummary {
    pub final_stage: usize,
    pub finished: bool,
    pub validation_runs: usize,
    /// `(stage, best_epoch, at_epoch)` per rollback.
    pub rollbacks: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub budget: usize,
    pub epochs_run: usize,
    pub final_clean_acc: Option<f64>,
    pub final_robust_acc: Option<f64>,
    /// Sum of the per-epoch `wall_seconds` column.
    pub train_seconds: f64,
    pub rounds: usize,
    pub checkpoint: Option<String>,
    pub cat: Option<CatSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub config: ExperimentConfig,
}

/// Creates `out` and writes the manifest, or on resume checks that the
/// existing manifest was written for the same configuration.
pub fn prepare_out(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<(), CliError> {
    let fail = |message: String| CliError::OutputDir {
        path: out.to_path_buf(),
        message,
    };
    fs::create_dir_all(out).map_err(|e| fail(e.to_string()))?;
    let path = out.join(MANIFEST_FILE);
    if resume && path.exists() {
        let m: Manifest = read_json(&path)?;
        if m.config_hash != cfg.hash() {
            return Err(CliError::Config(format!(
                "cannot resume: {} was written for a different configuration",
                path.display()
            )));
        }
        return Ok(());
    }
    let manifest = Manifest {
        format_version: crate::checkpoint::FORMAT_VERSION,
        config_hash: cfg.hash(),
        seeds: cfg.run.seeds.clone(),
        budget: cfg.regime.budget(),
        config: cfg.clone(),
    };
    write_json(&path, &manifest).map_err(|e| fail(e.to_string()))
}

/// Trains every configured seed into `out/seed-<n>`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<Vec<RunSummary>, CliError> {
    cfg.validate()?;
    prepare_out(cfg, out, resume)?;
    let data = cfg.load_data()?;
    cfg.run
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, &data, seed, &seed_dir(out, seed), resume))
        .collect()
}

/// Latest checkpoint in `dir`: the final one if present, else the highest
/// periodic one.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let fin = dir.join(FINAL_CHECKPOINT);
    if fin.exists() {
        return Some(fin);
    }
    let mut periodic: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ckpt"))
        })
        .collect();
    periodic.sort();
    periodic.pop()
}

fn restore(dir: &Path, ckpt_path: &Path, n_train: usize) -> Result<TrainState, CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let epoch = ckpt.epoch;
    let csv_path = dir.join(CSV_FILE);
    let rows: Vec<CsvRow> = read_csv(&csv_path)?.into_iter().filter(|r| r.epoch <= epoch).collect();
    if rows.len() != epoch {
        return Err(CliError::artifact(
            &csv_path,
            format!("expected {epoch} rows before the checkpoint, found {}", rows.len()),
        ));
    }
    write_csv(&csv_path, &rows)?;
    let trace_path = dir.join(TRACE_FILE);
    let rounds = if trace_path.exists() {
        let trace: StoredTrace = read_json(&trace_path)?;
        if trace.n_train != n_train {
            return Err(CliError::artifact(&trace_path, "training set size differs from the configuration"));
        }
        trace.records_until(epoch)?
    } else {
        Vec::new()
    };
    let initial_path = dir.join(INITIAL_FILE);
    let initial = if initial_path.exists() {
        Some(read_json::<StoredEval>(&initial_path)?.into())
    } else {
        None
    };
    ckpt.into_state(rounds, rows.into_iter().map(EpochReport::from).collect(), initial)
}

fn is_done(state: &TrainState, budget: usize) -> bool {
    state.epoch >= budget || state.cat.as_ref().is_some_and(|c| c.finished)
}

/// Trains one seed, writing a checkpoint every `checkpoint_every` epochs and
/// at the end. With `resume`, continues from the latest checkpoint in `dir`.
pub fn train_seed(cfg: &ExperimentConfig, data: &Prepared, seed: u64, dir: &Path, resume: bool) -> Result<RunSummary, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::OutputDir {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let summary_path = dir.join(SUMMARY_FILE);
    if resume && summary_path.exists() {
        return read_json(&summary_path);
    }
    let spec = cfg.regime_spec()?;
    let budget = spec.kind.budget();
    let mut trainer = Trainer::new(&spec, &data.train, &data.test, cfg.options())?;
    if let Some(val) = &data.val {
        trainer = trainer.with_validation(val);
    }
    let csv_path = dir.join(CSV_FILE);
    let mut state = match resume.then(|| latest_checkpoint(dir)).flatten() {
        Some(path) => {
            info!("seed {seed}: resuming from {}", path.display());
            restore(dir, &path, data.train.len())?
        }
        None => {
            write_csv(&csv_path, &[])?;
            let model = CompositeModel::build(cfg.arch_spec(&data.train, seed)).map_err(|e| CliError::Config(e.to_string()))?;
            trainer.init_state(model, seed)
        }
    };

    let every = cfg.run.checkpoint_every;
    let mut checkpoint = None;
    while !is_done(&state, budget) {
        let next = if every == 0 {
            budget
        } else {
            ((state.epoch / every + 1) * every).min(budget)
        };
        trainer.options.stop_at = Some(next);
        let before = state.reports.len();
        trainer.run_from(&mut state)?;
        for r in &state.reports[before..] {
            info!(
                "seed {seed} epoch {} [{}] loss {:.4} clean {:.2} robust {:.2}",
                r.epoch, r.phase, r.train_loss, r.clean_acc, r.robust_acc
            );
        }
        let rows: Vec<CsvRow> = state.reports.iter().map(CsvRow::from).collect();
        write_csv(&csv_path, &rows)?;
        if let Some(initial) = state.initial {
            write_json(&dir.join(INITIAL_FILE), &StoredEval::from(initial))?;
        }
        write_json(&dir.join(TRACE_FILE), &StoredTrace::of(&state, data.train.len()))?;
        let name = if is_done(&state, budget) {
            FINAL_CHECKPOINT.to_string()
        } else {
            periodic_checkpoint(state.epoch)
        };
        Checkpoint::from_state(&state).save(&dir.join(&name))?;
        checkpoint = Some(name);
    }
    if budget > 0 && checkpoint.is_none() {
        checkpoint = dir.join(FINAL_CHECKPOINT).exists().then(|| FINAL_CHECKPOINT.to_string());
    }
    if budget > 0 && !dir.join(TRACE_FILE).exists() {
        write_json(&dir.join(TRACE_FILE), &StoredTrace::of(&state, data.train.len()))?;
    }

    let last = state.reports.last();
    let summary = RunSummary {
        seed,
        budget,
        epochs_run: state.epoch,
        final_clean_acc: last.map(|r| r.clean_acc),
        final_robust_acc: last.and_then(|r| (!r.robust_acc.is_nan()).then_some(r.robust_acc)),
        train_seconds: state.reports.iter().map(|r| r.wall_seconds).sum(),
        rounds: state.rounds.len(),
        checkpoint,
        cat: state.cat.as_ref().map(|c| CatSummary {
            final_stage: c.stage,
            finished: c.finished,
            validation_runs: c.validation_runs,
            rollbacks: c.rollbacks.iter().map(|r| (r.stage, r.best_epoch, r.at_epoch)).collect(),
        }),
    };
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub examples: usize,
    pub clean_acc: f64,
    pub robust_examples: usize,
    /// `(attack name, accuracy %)`.
    pub robust: Vec<(String, f64)>,
}

/// Clean accuracy on the test split and robust accuracy under each named
/// evaluation attack (the configured one when `attacks` is empty).
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, attacks: &[String], seed: u64) -> Result<Evaluation, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = cfg.load_data()?;
    let model = CompositeModel::from_params(ckpt.arch.clone(), ckpt.params.clone()).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let test = &data.test;
    let presets = if attacks.is_empty() {
        vec![(cfg.eval.attack.clone(), cfg.eval_attack()?)]
    } else {
        attacks
            .iter()
            .map(|a| Ok((a.clone(), named_eval_attack(cfg.family(), a)?)))
            .collect::<Result<Vec<_>, CliError>>()?
    };
    let n = match cfg.eval.robust_subset {
        0 => test.len(),
        k => k.min(test.len()),
    };
    let clean_acc = accuracy(&model, test, test.len())?;
    let mut robust = Vec::new();
    for (name, attack) in presets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        robust.push((name, robust_accuracy(&model, test, n, &attack, &mut rng)?));
    }
    Ok(Evaluation {
        checkpoint: checkpoint.to_path_buf(),
        epoch: ckpt.epoch,
        examples: test.len(),
        clean_acc,
        robust_examples: n,
        robust,
    })
}
