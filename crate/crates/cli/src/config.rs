//! Experiment configuration: TOML with one section per concern. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use aetlab_core::attacks::{desk_train_pgd, preset, train_pgd, AttackPreset, Norm, PgdConfig, PresetFamily};
use aetlab_core::datasets::{
    gen_synthetic, load_mnist, parse_cifar10_bin, read_maybe_gz, AugmentConfig, Dataset, Split, SyntheticKind, SyntheticSpec,
};
use aetlab_core::models::{Activation, ArchSpec};
use aetlab_core::regimes::{Clock, EvalSpec, OptimConfig, RegimeKind, RegimeSpec, TrainOptions};
use aetlab_core::theory::{InstanceMetric, LossSpec, W1Mode, MAGIC_THRESHOLD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub regime: RegimeKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX image and label files (optionally gzipped), split per class.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        #[serde(default)]
        split_seed: u64,
    },
    /// CIFAR-10 binary batches, pooled, then split per class.
    Cifar10 {
        files: Vec<PathBuf>,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        #[serde(default)]
        split_seed: u64,
    },
    /// Two-class toy data; the test set uses `seed + 1`.
    Synthetic {
        kind: SyntheticKind,
        n_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        dim: usize,
        separation: f64,
        noise: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    SmallCnn,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "relu")]
        activation: Activation,
    },
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Named training attack; see [`TRAIN_PRESETS`].
    pub attack: String,
    /// Explicit attack, overriding `attack`.
    pub pgd: Option<PgdConfig>,
    pub optim: OptimConfig,
    pub augment: Option<AugmentConfig>,
    pub schedule_horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            attack: "pgd10".into(),
            pgd: None,
            optim: OptimConfig::default(),
            augment: None,
            schedule_horizon: None,
        }
    }
}

pub const TRAIN_PRESETS: [&str; 2] = ["pgd10", "pgd20"];

pub fn train_preset(name: &str) -> Option<PgdConfig> {
    match name {
        "pgd10" => Some(desk_train_pgd()),
        "pgd20" => Some(train_pgd()),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Preset table; defaults to `mnist` for MNIST data and `cifar` otherwise.
    pub family: Option<PresetFamily>,
    pub attack: String,
    /// Explicit attack, overriding `family` and `attack`.
    pub preset: Option<AttackPreset>,
    /// Test examples attacked per evaluation (0 = all).
    pub robust_subset: usize,
    /// Attack only after the final epoch.
    pub final_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            family: None,
            attack: "pgd20".into(),
            preset: None,
            robust_subset: 0,
            final_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Write a checkpoint every this many epochs (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub clock: Clock,
    /// Training examples attacked after each adversarial epoch to record
    /// the round trace (0 = no trace).
    #[serde(default)]
    pub trace_probe: usize,
    #[serde(default = "yes")]
    pub eval_initial: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub metric: InstanceMetric,
    pub delta_conf: f64,
    pub w1: W1Mode,
    pub loss: LossSpec,
    pub magic_window: usize,
    pub magic_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            metric: InstanceMetric { p: Norm::Linf, c: 1.0 },
            delta_conf: 0.05,
            w1: W1Mode::Exact,
            loss: LossSpec {
                rho: 1.0,
                m: 1.0,
                l: 1.0,
                scale_stat_by_m: false,
            },
            magic_window: 5,
            magic_threshold: MAGIC_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `(ce_epochs, at_epochs)` pairs.
    pub ratios: Vec<(usize, usize)>,
}

/// Built-in configurations selectable with `--preset`.
pub const PRESETS: [(&str, &str); 2] = [
    ("mnist-subset", include_str!("../presets/mnist-subset.toml")),
    ("synthetic", include_str!("../presets/synthetic.toml")),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown preset {name:?}")))?;
        Self::from_toml(text)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.run.seeds.is_empty() {
            return bad("run.seeds must not be empty");
        }
        let (train, test) = match &self.data {
            DataConfig::Mnist {
                train_per_class,
                test_per_class,
                ..
            }
            | DataConfig::Cifar10 {
                train_per_class,
                test_per_class,
                ..
            } => (*train_per_class, *test_per_class),
            DataConfig::Synthetic {
                n_per_class,
                test_per_class,
                ..
            } => (*n_per_class, *test_per_class),
        };
        if train <= self.val_per_class() || test == 0 {
            return bad("need more training examples per class than validation ones, and a test set");
        }
        if let ModelConfig::Mlp { hidden, .. } = &self.model {
            if hidden.contains(&0) {
                return bad("mlp hidden widths must be positive");
            }
        }
        self.eval_attack()?;
        self.regime_spec()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.report.delta_conf > 0.0 && self.report.delta_conf < 1.0) {
            return bad("report.delta_conf must lie in (0, 1)");
        }
        if self.report.magic_window == 0 {
            return bad("report.magic_window must be >= 1");
        }
        if let Some(sweep) = &self.sweep {
            check_ratios(&sweep.ratios, self.regime.budget())?;
        }
        Ok(())
    }

    fn val_per_class(&self) -> usize {
        match self.data {
            DataConfig::Mnist { val_per_class, .. }
            | DataConfig::Cifar10 { val_per_class, .. }
            | DataConfig::Synthetic { val_per_class, .. } => val_per_class,
        }
    }

    pub fn family(&self) -> PresetFamily {
        self.eval.family.unwrap_or(match self.data {
            DataConfig::Mnist { .. } => PresetFamily::Mnist,
            _ => PresetFamily::Cifar,
        })
    }

    pub fn eval_attack(&self) -> Result<AttackPreset, CliError> {
        if let Some(p) = self.eval.preset {
            return Ok(p);
        }
        named_eval_attack(self.family(), &self.eval.attack)
    }

    pub fn regime_spec(&self) -> Result<RegimeSpec, CliError> {
        Ok(RegimeSpec {
            kind: self.regime.clone(),
            pgd: self.train_attack()?,
            batch_size: self.train.batch_size,
            optim: self.train.optim,
            augment: self.train.augment,
            eval: EvalSpec {
                attack: self.eval_attack()?,
                robust_subset: self.eval.robust_subset,
                final_only: self.eval.final_only,
            },
            schedule_horizon: self.train.schedule_horizon,
        })
    }

    pub fn train_attack(&self) -> Result<PgdConfig, CliError> {
        self.train.pgd.or_else(|| train_preset(&self.train.attack)).ok_or_else(|| {
            CliError::Config(format!(
                "unknown training attack {:?} (known: {})",
                self.train.attack,
                TRAIN_PRESETS.join(", ")
            ))
        })
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            clock: self.run.clock,
            keep_trajectory: false,
            trace_probe: self.run.trace_probe,
            eval_initial: self.run.eval_initial,
            stop_at: None,
        }
    }

    pub fn arch_spec(&self, data: &Dataset, seed: u64) -> ArchSpec {
        let shape = data.image_shape();
        match &self.model {
            ModelConfig::SmallCnn => ArchSpec::small_cnn(shape, data.num_classes(), seed),
            ModelConfig::Mlp { hidden, activation } => {
                let mut widths = vec![shape.iter().product()];
                widths.extend(hidden);
                widths.push(data.num_classes());
                ArchSpec::mlp(widths, *activation, shape, seed)
            }
        }
    }

    /// Loads and splits the configured data.
    pub fn load_data(&self) -> Result<Prepared, CliError> {
        let (pool, train_pc, test_pc, val_pc, seed) = match &self.data {
            DataConfig::Mnist {
                images,
                labels,
                train_per_class,
                test_per_class,
                val_per_class,
                split_seed,
            } => (
                load_mnist(images, labels, Split::Train)?,
                *train_per_class,
                *test_per_class,
                *val_per_class,
                *split_seed,
            ),
            DataConfig::Cifar10 {
                files,
                train_per_class,
                test_per_class,
                val_per_class,
                split_seed,
            } => {
                let mut bytes = Vec::new();
                for f in files {
                    bytes.extend(read_maybe_gz(f)?);
                }
                (
                    parse_cifar10_bin(&bytes, Split::Train)?,
                    *train_per_class,
                    *test_per_class,
                    *val_per_class,
                    *split_seed,
                )
            }
            DataConfig::Synthetic {
                kind,
                n_per_class,
                test_per_class,
                val_per_class,
                dim,
                separation,
                noise,
                seed,
            } => {
                let spec = |n, seed| SyntheticSpec {
                    kind: *kind,
                    n_per_class: n,
                    dim: *dim,
                    separation: *separation,
                    noise: *noise,
                    seed,
                };
                let train = gen_synthetic(&spec(*n_per_class, *seed))?;
                let mut test = gen_synthetic(&spec(*test_per_class, seed + 1))?;
                test.split = Split::Test;
                return Ok(Prepared::with_validation(train, test, *val_per_class, *seed));
            }
        };
        let (train, mut test) = pool.stratified_split(train_pc, test_pc, seed);
        test.split = Split::Test;
        if train.len() != train_pc * pool.num_classes() || test.len() != test_pc * pool.num_classes() {
            return Err(CliError::Config(format!(
                "data has too few examples for {train_pc}+{test_pc} per class"
            )));
        }
        Ok(Prepared::with_validation(train, test, val_pc, seed))
    }
}

pub fn named_eval_attack(family: PresetFamily, name: &str) -> Result<AttackPreset, CliError> {
    preset(family, name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown evaluation attack {name:?} (known: {})",
            aetlab_core::attacks::PRESET_NAMES.join(", ")
        ))
    })
}

/// Ratios must each sum to `budget`.
pub fn check_ratios(ratios: &[(usize, usize)], budget: usize) -> Result<(), CliError> {
    if ratios.is_empty() {
        return Err(CliError::Config("no ratios given".into()));
    }
    match ratios.iter().find(|(ce, at)| ce + at != budget) {
        Some((ce, at)) => Err(CliError::Config(format!("ratio {ce}/{at} does not sum to the budget {budget}"))),
        None => Ok(()),
    }
}

pub struct Prepared {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl Prepared {
    fn with_validation(train: Dataset, test: Dataset, val_per_class: usize, seed: u64) -> Self {
        if val_per_class == 0 {
            return Prepared { train, val: None, test };
        }
        let per_class = train.len() / train.num_classes();
        let (train, val) = train.stratified_split(per_class - val_per_class, val_per_class, seed);
        Prepared {
            train,
            val: Some(val),
            test,
        }
    }
}
