//! Experiment protocols over the synthetic stack, and the metrics they report.

mod commands;
mod config;
pub mod gradcheck;
mod plot;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

pub use commands::{
    cmd_angles, cmd_base2new, cmd_domainshift, cmd_fewshot, cmd_gradcheck, cmd_lambda_sweep, run_command,
    AggregateRow, AngleRow, Command, CommandReport, FailureOverlapRow, ResultRow, RunOptions,
};
pub use config::{ExperimentConfig, Gap};

/// `2ab / (a + b)`, or zero when `a + b = 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Among items that `pred_a` gets wrong and `pred_b` gets right, the fraction
/// the zero-shot prediction also gets wrong. `None` when no such item exists.
pub fn failure_overlap(pred_a: &[usize], pred_b: &[usize], pred_zs: &[usize], truth: &[usize]) -> Result<Option<f64>> {
    check_len("pred_b", pred_b.len(), pred_a.len())?;
    check_len("pred_zs", pred_zs.len(), pred_a.len())?;
    check_len("truth", truth.len(), pred_a.len())?;
    let (mut failures, mut shared) = (0usize, 0usize);
    for i in 0..truth.len() {
        if pred_a[i] != truth[i] && pred_b[i] == truth[i] {
            failures += 1;
            shared += usize::from(pred_zs[i] != truth[i]);
        }
    }
    Ok((failures > 0).then(|| shared as f64 / failures as f64))
}

/// Mean, sample standard deviation and 95% half-width `1.96·σ/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { n, mean: 0.0, std: 0.0, ci95: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Summary { n, mean, std: 0.0, ci95: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Summary { n, mean, std, ci95: 1.96 * std / (n as f64).sqrt() }
}

/// One-sided sign test of "`a` tends to exceed `b`" over paired samples.
/// Ties are dropped; returns `(wins, losses, p)` with
/// `p = P(Binomial(wins + losses, ½) ≥ wins)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    if n == 0 {
        return (0, 0, 1.0);
    }
    // Sum the upper tail of the binomial in log space.
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    let p: f64 = (wins..=n).map(|k| (ln_choose(k) - n as f64 * 2f64.ln()).exp()).sum();
    (wins, losses, p.min(1.0))
}
