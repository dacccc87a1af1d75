//! Binary checkpoints: magic, format version, a JSON header holding the
//! shape manifest and scalar state, then every tensor as raw little-endian
//! f64 in manifest order. Floats in the header are stored as their bit
//! patterns so a load reproduces the saved state exactly.

use std::path::Path;

use aetlab_autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use aetlab_core::models::{ArchSpec, CompositeModel};
use aetlab_core::regimes::{CatState, EpochReport, EvalPoint, Rollback, RoundRecord, TrainState};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"AETCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    /// Run seed; with `epoch` it fixes every random stream still to come.
    pub seed: u64,
    pub epoch: usize,
    pub work: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub cat: Option<CatState>,
    /// Parameters of the most recent adversarial round, which may differ
    /// from `params` after a rollback.
    pub last_round_params: Option<ParamStore>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    seed: u64,
    epoch: usize,
    work: u64,
    adam: AdamHeader,
    cat: Option<CatHeader>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    /// lr, beta1, beta2, eps, weight_decay.
    config: [u64; 5],
    step: u64,
}

impl AdamHeader {
    fn of(adam: &Adam) -> Self {
        let c = adam.config;
        AdamHeader {
            config: [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay].map(f64::to_bits),
            step: adam.step_count(),
        }
    }

    fn config(&self) -> AdamConfig {
        let [lr, beta1, beta2, eps, weight_decay] = self.config.map(f64::from_bits);
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatHeader {
    stage: usize,
    best_metric: u64,
    best_epoch: usize,
    best_adam: AdamHeader,
    since_best: usize,
    finished: bool,
    validation_runs: usize,
    rollbacks: Vec<RollbackHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RollbackHeader {
    stage: usize,
    best_epoch: usize,
    best_metric: u64,
    at_epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

struct Writer {
    entries: Vec<Entry>,
    data: Vec<u8>,
}

impl Writer {
    fn store(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.tensor(format!("{prefix}/{name}"), t.shape().to_vec(), t.data());
        }
    }

    fn moments(&mut self, prefix: &str, params: &ParamStore, adam: &Adam) {
        for (which, moments) in [("m", adam.first_moments()), ("v", adam.second_moments())] {
            for ((name, t), m) in params.iter().zip(moments) {
                self.tensor(format!("{prefix}.{which}/{name}"), t.shape().to_vec(), m);
            }
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        self.entries.push(Entry { name, shape });
        for v in data {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader {
    tensors: Vec<(String, Tensor)>,
}

impl Reader {
    fn store(&self, prefix: &str) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')) {
                p.push(rest, t.clone());
            }
        }
        p
    }

    fn adam(&self, prefix: &str, header: &AdamHeader, params: &ParamStore) -> Result<Adam, CliError> {
        let first = self.store(&format!("{prefix}.m")).iter().map(|(_, t)| t.data().to_vec()).collect();
        let second = self.store(&format!("{prefix}.v")).iter().map(|(_, t)| t.data().to_vec()).collect();
        Adam::from_parts(header.config(), header.step, first, second, params)
            .map_err(|e| CliError::Checkpoint(format!("optimizer state: {e}")))
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            arch: state.model.spec().clone(),
            seed: state.seed,
            epoch: state.epoch,
            work: state.work,
            params: state.model.params().clone(),
            adam: state.adam.clone(),
            cat: state.cat.clone(),
            last_round_params: state.rounds.last().map(|r| r.params.clone()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer {
            entries: Vec::new(),
            data: Vec::new(),
        };
        w.store("model", &self.params);
        w.moments("adam", &self.params, &self.adam);
        let cat = self.cat.as_ref().map(|c| {
            w.store("cat.best", &c.best_params);
            w.moments("cat.adam", &c.best_params, &c.best_adam);
            for (k, r) in c.rollbacks.iter().enumerate() {
                w.store(&format!("rollback.{k}"), &r.restored);
            }
            CatHeader {
                stage: c.stage,
                best_metric: c.best_metric.to_bits(),
                best_epoch: c.best_epoch,
                best_adam: AdamHeader::of(&c.best_adam),
                since_best: c.since_best,
                finished: c.finished,
                validation_runs: c.validation_runs,
                rollbacks: c
                    .rollbacks
                    .iter()
                    .map(|r| RollbackHeader {
                        stage: r.stage,
                        best_epoch: r.best_epoch,
                        best_metric: r.best_metric.to_bits(),
                        at_epoch: r.at_epoch,
                    })
                    .collect(),
            }
        });
        if let Some(p) = &self.last_round_params {
            w.store("round", p);
        }
        let header = Header {
            arch: self.arch.clone(),
            seed: self.seed,
            epoch: self.epoch,
            work: self.work,
            adam: AdamHeader::of(&self.adam),
            cat,
            tensors: w.entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + w.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let mut data = &bytes[20 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad(format!("truncated data for {}", e.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Tensor::new(e.shape.clone(), values).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        let r = Reader { tensors };
        let params = r.store("model");
        CompositeModel::from_params(header.arch.clone(), params.clone()).map_err(|e| bad(e.to_string()))?;
        let adam = r.adam("adam", &header.adam, &params)?;
        let cat = match header.cat {
            None => None,
            Some(c) => {
                let best_params = r.store("cat.best");
                let best_adam = r.adam("cat.adam", &c.best_adam, &best_params)?;
                let rollbacks = c
                    .rollbacks
                    .iter()
                    .enumerate()
                    .map(|(k, h)| Rollback {
                        stage: h.stage,
                        best_epoch: h.best_epoch,
                        best_metric: f64::from_bits(h.best_metric),
                        at_epoch: h.at_epoch,
                        restored: r.store(&format!("rollback.{k}")),
                    })
                    .collect();
                Some(CatState {
                    stage: c.stage,
                    best_metric: f64::from_bits(c.best_metric),
                    best_epoch: c.best_epoch,
                    best_params,
                    best_adam,
                    since_best: c.since_best,
                    finished: c.finished,
                    validation_runs: c.validation_runs,
                    rollbacks,
                })
            }
        };
        let round = r.store("round");
        Ok(Checkpoint {
            arch: header.arch,
            seed: header.seed,
            epoch: header.epoch,
            work: header.work,
            params,
            adam,
            cat,
            last_round_params: (!round.is_empty()).then_some(round),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        crate::write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Training state to continue from. `rounds` and `reports` cover the
    /// epochs up to the checkpoint; the last round gets its saved parameters.
    pub fn into_state(
        self,
        mut rounds: Vec<RoundRecord>,
        reports: Vec<EpochReport>,
        initial: Option<EvalPoint>,
    ) -> Result<TrainState, CliError> {
        let model = CompositeModel::from_params(self.arch, self.params).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        if let (Some(last), Some(p)) = (rounds.last_mut(), self.last_round_params) {
            last.params = p;
        }
        Ok(TrainState {
            model,
            adam: self.adam,
            epoch: self.epoch,
            seed: self.seed,
            reports,
            initial,
            cat: self.cat,
            trajectory: None,
            rounds,
            work: self.work,
        })
    }
}
