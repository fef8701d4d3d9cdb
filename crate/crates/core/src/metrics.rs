//! Dice similarity and mean/std reporting.

use crate::error::{Error, Result};

/// Probability threshold used to turn predictions into binary masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

pub fn binarize(probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| if p >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
        .collect()
}

/// `2|P ∩ G| / (|P| + |G|)` for binary masks; two empty masks score 1.
pub fn dice_coefficient(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            found: pred.len(),
        });
    }
    if pred.iter().chain(target).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::config("dice coefficient expects binary masks"));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StdConvention {
    /// Divisor n.
    #[default]
    Population,
    /// Divisor n - 1 (0 for a single value).
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64], convention: StdConvention) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::config("cannot summarize an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let divisor = match convention {
        StdConvention::Population => n,
        StdConvention::Sample if values.len() > 1 => n - 1.0,
        StdConvention::Sample => 1.0,
    };
    Ok(MeanStd {
        mean,
        std: (ss / divisor).sqrt(),
    })
}

/// Mean and population std of per-run final scores.
pub fn summarize_runs(final_means: &[f64]) -> Result<MeanStd> {
    mean_std(final_means, StdConvention::Population)
}

/// Per-sample Dice scores of one model on one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_sample: Vec<f64>,
    pub mean_across_samples: f64,
    pub std_across_samples: f64,
}

impl DiceReport {
    pub fn from_per_sample(per_sample: Vec<f64>, convention: StdConvention) -> Result<Self> {
        let MeanStd { mean, std } = mean_std(&per_sample, convention)?;
        Ok(Self {
            per_sample,
            mean_across_samples: mean,
            std_across_samples: std,
        })
    }
}
