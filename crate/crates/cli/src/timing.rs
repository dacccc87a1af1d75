//! Cost of a budget split into `n_ce` clean epochs and the rest adversarial,
//! against an all-adversarial baseline.

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    pub ce_epoch_seconds: f64,
    pub at_epoch_seconds: f64,
    pub total_epochs: usize,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            ce_epoch_seconds: 19.25,
            at_epoch_seconds: 123.85,
            total_epochs: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub n_ce: usize,
    pub total_seconds: f64,
    pub baseline_seconds: f64,
    /// `100 * (baseline - total) / baseline`, rounded to two decimals.
    pub savings_percent: f64,
}

/// Costs are handled in integer microseconds, so inputs with up to six
/// decimals give exact totals.
const MICROS: f64 = 1e6;

fn micros(seconds: f64) -> i128 {
    (seconds * MICROS).round() as i128
}

impl TimingModel {
    pub fn validate(&self) -> Result<(), CliError> {
        let ok = |v: f64| v > 0.0 && v.is_finite() && v * MICROS < 1e18;
        if !ok(self.ce_epoch_seconds) || !ok(self.at_epoch_seconds) || self.total_epochs == 0 {
            return Err(CliError::Config("timing model needs positive epoch costs and total_epochs".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, n_ce: usize) -> Result<TimingResult, CliError> {
        self.validate()?;
        if n_ce > self.total_epochs {
            return Err(CliError::Config(format!(
                "n_ce = {n_ce} exceeds total_epochs = {}",
                self.total_epochs
            )));
        }
        let (ce, at) = (micros(self.ce_epoch_seconds), micros(self.at_epoch_seconds));
        let total = n_ce as i128 * ce + (self.total_epochs - n_ce) as i128 * at;
        let baseline = self.total_epochs as i128 * at;
        // Hundredths of a percent, rounded half up.
        let saved = baseline - total;
        let hundredths = (2 * saved * 10_000 + baseline).div_euclid(2 * baseline);
        Ok(TimingResult {
            n_ce,
            total_seconds: total as f64 / MICROS,
            baseline_seconds: baseline as f64 / MICROS,
            savings_percent: hundredths as f64 / 100.0,
        })
    }
}
