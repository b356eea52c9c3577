//! Batch classification, multi-layer score fusion and detection metrics.

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyEstimate;
use crate::error::{Error, Result};
use crate::profile::{infer_direction, BaselineProfile, DetectionThreshold, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clean,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub layer_key: String,
    pub entropy_bits: f64,
    pub tau: f64,
    pub direction: Direction,
    pub label: Label,
}

/// Labels one batch by comparing its entropy against the layer threshold.
///
/// Empty estimates (no positive activations) are rejected with a data error
/// rather than classified.
pub fn classify_batch(entropy: &EntropyEstimate, threshold: &DetectionThreshold) -> Result<Verdict> {
    if entropy.layer_key != threshold.layer_key {
        return Err(Error::config(format!(
            "estimate for '{}' cannot use threshold for '{}'",
            entropy.layer_key, threshold.layer_key
        )));
    }
    if entropy.empty {
        return Err(Error::data(format!(
            "degenerate batch at '{}': no positive activations",
            entropy.layer_key
        )));
    }
    let label = if threshold
        .direction
        .is_adversarial(entropy.entropy_bits, threshold.tau)
    {
        Label::Adversarial
    } else {
        Label::Clean
    };
    Ok(Verdict {
        layer_key: entropy.layer_key.clone(),
        entropy_bits: entropy.entropy_bits,
        tau: threshold.tau,
        direction: threshold.direction,
        label,
    })
}

/// Weighted sum of direction-signed clean-baseline z-scores. Larger means
/// more adversarial.
pub fn fuse_scores(
    estimates: &[EntropyEstimate],
    profiles: &[BaselineProfile],
    weights: &[f64],
) -> Result<f64> {
    if estimates.len() != profiles.len() || estimates.len() != weights.len() {
        return Err(Error::config(format!(
            "fusion needs aligned inputs: {} estimates, {} profiles, {} weights",
            estimates.len(),
            profiles.len(),
            weights.len()
        )));
    }
    if !weights.iter().any(|&w| w != 0.0) {
        return Err(Error::config("fusion needs at least one nonzero weight"));
    }
    let mut score = 0.0;
    for ((est, prof), &w) in estimates.iter().zip(profiles).zip(weights) {
        if est.layer_key != prof.layer_key {
            return Err(Error::config(format!(
                "estimate for '{}' aligned with profile for '{}'",
                est.layer_key, prof.layer_key
            )));
        }
        if prof.clean.std.is_nan() || prof.clean.std <= 0.0 {
            return Err(Error::calibration(format!(
                "clean entropy spread for '{}' is zero",
                prof.layer_key
            )));
        }
        let d = infer_direction(prof)?.sign();
        score += w * d * (est.entropy_bits - prof.clean.mean) / prof.clean.std;
    }
    Ok(score)
}

/// Confusion counts and rates with adversarial as the positive class.
///
/// A rate whose denominator is zero is reported as 0 and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// No clean ground-truth samples: `fpr` and `tnr` are undefined.
    pub no_negatives: bool,
    /// No adversarial ground-truth samples: `fnr` and `tpr` are undefined.
    pub no_positives: bool,
}

impl DetectionMetrics {
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let total = tp + tn + fp + fn_;
        DetectionMetrics {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tp + tn, total),
            fpr: ratio(fp, fp + tn),
            fnr: ratio(fn_, fn_ + tp),
            tpr: ratio(tp, fn_ + tp),
            tnr: ratio(tn, fp + tn),
            no_negatives: fp + tn == 0,
            no_positives: fn_ + tp == 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn evaluate(verdicts: &[Verdict], ground_truth: &[Label]) -> Result<DetectionMetrics> {
    let predicted: Vec<Label> = verdicts.iter().map(|v| v.label).collect();
    evaluate_labels(&predicted, ground_truth)
}

/// Confusion matrix of predicted against true labels.
pub fn evaluate_labels(predicted: &[Label], ground_truth: &[Label]) -> Result<DetectionMetrics> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::config(format!(
            "{} verdicts but {} ground-truth labels",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::config("cannot evaluate an empty verdict list"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in predicted.iter().zip(ground_truth) {
        match (t, p) {
            (Label::Adversarial, Label::Adversarial) => tp += 1,
            (Label::Clean, Label::Clean) => tn += 1,
            (Label::Clean, Label::Adversarial) => fp += 1,
            (Label::Adversarial, Label::Clean) => fn_ += 1,
        }
    }
    Ok(DetectionMetrics::from_counts(tp, tn, fp, fn_))
}
