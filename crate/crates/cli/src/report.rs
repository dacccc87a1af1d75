//! `report`: the bound over a finished run's round trace, detection of the
//! post-switch robustness jump, and accuracy curves.

use std::path::{Path, PathBuf};

use aetlab_core::regimes::RegimeKind;
use aetlab_core::theory::{bound_assemble, magic_phase_detect, BoundReport, MagicPhase};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{read_csv, CsvRow, Manifest, StoredEval, StoredTrace, CSV_FILE, INITIAL_FILE, MANIFEST_FILE, SUMMARY_FILE, TRACE_FILE};
use crate::{read_json, write_json, CliError};

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: PathBuf,
    pub regime: RegimeKind,
    pub epochs: usize,
    pub adversarial_rounds: usize,
    pub round_epochs: Vec<usize>,
    /// Absent when the run has no adversarial rounds.
    pub bound: Option<BoundReport>,
    /// First adversarial epoch of a run that starts adversarial training.
    pub switch_epoch: Option<usize>,
    pub magic_phase: Option<MagicPhase>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub phase_label: String,
}

/// Configuration a run directory was produced with, from the manifest one
/// level up.
pub fn run_config(run_dir: &Path) -> Result<ExperimentConfig, CliError> {
    let path = run_dir.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Incomplete {
            dir: run_dir.to_path_buf(),
            missing: vec![path.display().to_string()],
        });
    }
    Ok(read_json::<Manifest>(&path)?.config)
}

/// Epoch whose gain over its predecessor first reflects adversarial
/// training, for regimes that have one.
fn switch_epoch(regime: &RegimeKind) -> Option<usize> {
    match *regime {
        RegimeKind::Aet { t0, t1, .. } if t1 > 0 => Some(t0 + 1),
        RegimeKind::At { epochs } | RegimeKind::Trades { epochs, .. } if epochs > 0 => Some(1),
        _ => None,
    }
}

pub fn cmd_report(run_dir: &Path, cfg: &ExperimentConfig) -> Result<RunReport, CliError> {
    let mut required = vec![CSV_FILE, SUMMARY_FILE];
    if cfg.regime.budget() > 0 {
        required.push(TRACE_FILE);
        if cfg.run.eval_initial {
            required.push(INITIAL_FILE);
        }
    }
    let missing: Vec<String> = required
        .iter()
        .filter(|f| !run_dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Incomplete {
            dir: run_dir.to_path_buf(),
            missing,
        });
    }

    let rows: Vec<CsvRow> = read_csv(&run_dir.join(CSV_FILE))?;
    let initial: Option<StoredEval> = if run_dir.join(INITIAL_FILE).exists() {
        Some(read_json(&run_dir.join(INITIAL_FILE))?)
    } else {
        None
    };
    let trace: Option<StoredTrace> = if run_dir.join(TRACE_FILE).exists() {
        Some(read_json(&run_dir.join(TRACE_FILE))?)
    } else {
        None
    };

    let mut notes = Vec::new();
    let rc = &cfg.report;
    let (bound, adversarial_rounds, round_epochs) = match &trace {
        Some(t) if !t.trace.rounds.is_empty() => {
            let b = bound_assemble(&t.trace, &rc.loss, &rc.metric, rc.delta_conf, t.n_train, rc.w1)?;
            if b.rounds == 1 {
                notes.push("single adversarial round: drift term is 0".into());
            }
            (Some(b), t.trace.rounds.len(), t.round_epochs.clone())
        }
        _ => {
            notes.push(if cfg.run.trace_probe == 0 {
                "no round trace was recorded (run.trace_probe = 0); drift section omitted".into()
            } else {
                "no adversarial rounds; drift section omitted".into()
            });
            (None, 0, Vec::new())
        }
    };

    let mut series = vec![initial.and_then(|i| i.robust_acc)];
    series.extend(rows.iter().map(|r| r.robust_acc));
    let switch = switch_epoch(&cfg.regime).filter(|&s| s <= rows.len());
    let magic_phase = match switch {
        None => {
            notes.push("no switch to adversarial training; magic phase not applicable".into());
            None
        }
        Some(s) => {
            let window = rc.magic_window.min(rows.len() + 1 - s);
            let needed: Option<Vec<f64>> = series[s - 1..s + window].iter().copied().collect();
            match needed {
                Some(_) => {
                    let full: Vec<f64> = series.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
                    Some(magic_phase_detect(&full, s, window, rc.magic_threshold)?)
                }
                None => {
                    notes.push("robust accuracy was not measured around the switch; magic phase not computed".into());
                    None
                }
            }
        }
    };

    let mut curves = Vec::with_capacity(rows.len() + 1);
    if let Some(i) = initial {
        curves.push(CurveRow {
            epoch: 0,
            clean_acc: i.clean_acc,
            robust_acc: i.robust_acc,
            phase_label: "init".into(),
        });
    }
    curves.extend(rows.iter().map(|r| CurveRow {
        epoch: r.epoch,
        clean_acc: r.clean_acc,
        robust_acc: r.robust_acc,
        phase_label: r.phase.clone(),
    }));
    let curves_path = run_dir.join(CURVES_FILE);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(b"epoch,clean_acc,robust_acc,phase_label\n".to_vec());
    for c in &curves {
        w.serialize(c).map_err(|e| CliError::artifact(&curves_path, e))?;
    }
    crate::write_file(&curves_path, &w.into_inner().map_err(|e| CliError::artifact(&curves_path, e))?)?;

    let report = RunReport {
        run: run_dir.to_path_buf(),
        regime: cfg.regime.clone(),
        epochs: rows.len(),
        adversarial_rounds,
        round_epochs,
        bound,
        switch_epoch: switch,
        magic_phase,
        notes,
    };
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}
