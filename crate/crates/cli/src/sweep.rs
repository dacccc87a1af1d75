//! `sweep-ratio`: one two-phase run per `(ce, at)` split of the budget.

use std::path::Path;

use aetlab_core::regimes::RegimeKind;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{check_ratios, ExperimentConfig};
use crate::run::{cmd_train, RunSummary};
use crate::CliError;

pub const SUMMARY_CSV: &str = "summary.csv";

/// One row of the sweep table; accuracies are means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: String,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub baseline: bool,
    pub ce_epochs: usize,
    pub at_epochs: usize,
    pub seeds: usize,
}

/// Drops repeated ratios, keeping first occurrences in order.
pub fn dedupe_ratios(ratios: &[(usize, usize)]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &r in ratios {
        if kept.contains(&r) {
            dropped.push(r);
        } else {
            kept.push(r);
        }
    }
    (kept, dropped)
}

/// Parses `"0/10,2/8"`.
pub fn parse_ratios(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(',')
        .map(|part| {
            let (ce, at) = part
                .trim()
                .split_once('/')
                .ok_or_else(|| CliError::Config(format!("ratio {part:?} is not of the form ce/at")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("ratio {part:?} is not of the form ce/at")))
            };
            Ok((num(ce)?, num(at)?))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    let all: Option<Vec<f64>> = v.iter().copied().collect();
    all.filter(|a| !a.is_empty()).map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, ratios: &[(usize, usize)], out: &Path) -> Result<Vec<SweepRow>, CliError> {
    let budget = cfg.regime.budget();
    check_ratios(ratios, budget)?;
    let (ratios, dropped) = dedupe_ratios(ratios);
    for (ce, at) in dropped {
        warn!("ratio {ce}/{at} listed more than once; running it once");
    }
    let trades_beta = match cfg.regime {
        RegimeKind::Aet { trades_beta, .. } => trades_beta,
        _ => None,
    };
    let configs: Vec<ExperimentConfig> = ratios
        .iter()
        .map(|&(t0, t1)| {
            let mut c = cfg.clone();
            c.regime = RegimeKind::Aet { t0, t1, trades_beta };
            c.sweep = None;
            c.run.out = out.join(format!("ratio-{t0}-{t1}"));
            c
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let runs: Vec<Vec<RunSummary>> = configs
        .par_iter()
        .map(|c| cmd_train(c, &c.run.out, false))
        .collect::<Result<_, _>>()?;
    let rows: Vec<SweepRow> = ratios
        .iter()
        .zip(&runs)
        .map(|(&(ce, at), summaries)| SweepRow {
            ratio: format!("{ce}/{at}"),
            clean_acc: mean(summaries.iter().map(|s| s.final_clean_acc)).unwrap_or(f64::NAN),
            robust_acc: mean(summaries.iter().map(|s| s.final_robust_acc)),
            baseline: ce == 0,
            ce_epochs: ce,
            at_epochs: at,
            seeds: summaries.len(),
        })
        .collect();
    let path = out.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::artifact(&path, e))?;
    }
    crate::write_file(&path, &w.into_inner().map_err(|e| CliError::artifact(&path, e))?)?;
    Ok(rows)
}
