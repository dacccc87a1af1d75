use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aetlab_cli::config::ExperimentConfig;
use aetlab_cli::report::{cmd_report, run_config};
use aetlab_cli::run::{cmd_evaluate, cmd_train, seed_dir};
use aetlab_cli::sweep::{cmd_sweep, parse_ratios};
use aetlab_cli::timing::TimingModel;
use aetlab_cli::{thread_cap, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aetlab", about = "Ignition-then-adversarial training experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: mnist-subset or synthetic.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Run this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding run.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed.
    Train {
        /// Continue from the latest checkpoint of each seed.
        #[arg(long)]
        resume: bool,
    },
    /// One two-phase run per CE/AT split of the budget.
    SweepRatio {
        /// Comma-separated ce/at pairs, e.g. 0/10,2/8,3/7; defaults to sweep.ratios.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Cost of n_ce clean epochs plus the rest adversarial.
    TimingModel {
        #[arg(long)]
        n_ce: usize,
        #[arg(long, default_value_t = 19.25)]
        ce_seconds: f64,
        #[arg(long, default_value_t = 123.85)]
        at_seconds: f64,
        #[arg(long, default_value_t = 100)]
        total_epochs: usize,
    },
    /// Bound report, magic-phase summary and curves for finished runs.
    Report {
        /// A single seed directory; defaults to every seed under the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation attack by name (repeatable); defaults to the configured one.
        #[arg(long)]
        attack: Vec<String>,
    },
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(CliError::Config("pass --config PATH or --preset NAME".into())),
        };
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { resume } => {
            let cfg = cli.experiment()?;
            print_json(&cmd_train(&cfg, &cfg.run.out, *resume)?);
        }
        Command::SweepRatio { ratios } => {
            let cfg = cli.experiment()?;
            let ratios = match (ratios, &cfg.sweep) {
                (Some(text), _) => parse_ratios(text)?,
                (None, Some(s)) => s.ratios.clone(),
                (None, None) => return Err(CliError::Config("no ratios: pass --ratios or set sweep.ratios".into())),
            };
            print_json(&cmd_sweep(&cfg, &ratios, &cfg.run.out)?);
        }
        Command::TimingModel {
            n_ce,
            ce_seconds,
            at_seconds,
            total_epochs,
        } => {
            let tm = TimingModel {
                ce_epoch_seconds: *ce_seconds,
                at_epoch_seconds: *at_seconds,
                total_epochs: *total_epochs,
            };
            print_json(&tm.evaluate(*n_ce)?);
        }
        Command::Report { run } => {
            let dirs: Vec<PathBuf> = match run {
                Some(dir) => vec![dir.clone()],
                None => {
                    let cfg = cli.experiment()?;
                    cfg.run.seeds.iter().map(|&s| seed_dir(&cfg.run.out, s)).collect()
                }
            };
            let mut reports = Vec::new();
            for dir in &dirs {
                let cfg = match (&cli.config, &cli.preset) {
                    (None, None) => run_config(dir)?,
                    _ => cli.experiment()?,
                };
                reports.push(cmd_report(dir, &cfg)?);
            }
            print_json(&reports);
        }
        Command::Evaluate { checkpoint, attack } => {
            let cfg = cli.experiment()?;
            print_json(&cmd_evaluate(&cfg, Path::new(checkpoint), attack, cli.seed.unwrap_or(0))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = thread_cap() {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
