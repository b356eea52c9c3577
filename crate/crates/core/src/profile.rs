//! Reference entropy distributions and threshold calibration.

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyEstimate;
use crate::error::{Error, Result};

/// Which side of the threshold is flagged adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Adversarial when entropy is strictly below tau.
    AdversarialBelow,
    /// Adversarial when entropy is strictly above tau.
    AdversarialAbove,
}

impl Direction {
    /// True when `entropy` falls on the adversarial side of `tau`.
    /// Equality is always clean.
    pub fn is_adversarial(self, entropy: f64, tau: f64) -> bool {
        match self {
            Direction::AdversarialBelow => entropy < tau,
            Direction::AdversarialAbove => entropy > tau,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::AdversarialBelow => Direction::AdversarialAbove,
            Direction::AdversarialAbove => Direction::AdversarialBelow,
        }
    }

    /// +1 when adversarial inputs raise entropy, -1 when they lower it.
    pub fn sign(self) -> f64 {
        match self {
            Direction::AdversarialAbove => 1.0,
            Direction::AdversarialBelow => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Midpoint,
    Optimized,
}

/// Summary statistics of a sample (sample standard deviation, n - 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SampleStats {
    pub fn of(samples: &[f64]) -> Self {
        assert!(samples.len() >= 2, "sample statistics need at least 2 values");
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        SampleStats {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

/// Clean (and optionally adversarial) training entropies for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineProfile {
    pub layer_key: String,
    pub clean_entropies: Vec<f64>,
    pub adversarial_entropies: Option<Vec<f64>>,
    pub clean: SampleStats,
    pub adversarial: Option<SampleStats>,
    pub batch_size: usize,
    pub n_train_batches: usize,
}

impl BaselineProfile {
    fn adversarial_samples(&self) -> Result<&[f64]> {
        self.adversarial_entropies.as_deref().ok_or_else(|| {
            Error::calibration(format!(
                "profile for '{}' has no adversarial samples",
                self.layer_key
            ))
        })
    }

    fn adversarial_stats(&self) -> Result<SampleStats> {
        self.adversarial.ok_or_else(|| {
            Error::calibration(format!(
                "profile for '{}' has no adversarial statistics",
                self.layer_key
            ))
        })
    }

    /// Training error rates of (tau, direction) on the stored samples.
    pub fn training_rates(&self, tau: f64, direction: Direction) -> Result<(f64, f64)> {
        let adv = self.adversarial_samples()?;
        Ok(rates(&self.clean_entropies, adv, tau, direction))
    }
}

/// (FPR, FNR) of (tau, direction) on clean and adversarial samples.
pub fn rates(clean: &[f64], adversarial: &[f64], tau: f64, direction: Direction) -> (f64, f64) {
    let fp = clean
        .iter()
        .filter(|&&s| direction.is_adversarial(s, tau))
        .count();
    let fn_ = adversarial
        .iter()
        .filter(|&&s| !direction.is_adversarial(s, tau))
        .count();
    (
        fp as f64 / clean.len() as f64,
        fn_ as f64 / adversarial.len() as f64,
    )
}

fn check_estimates(estimates: &[EntropyEstimate], layer_key: &str, what: &str) -> Result<Vec<f64>> {
    if estimates.len() < 2 {
        return Err(Error::data(format!(
            "{what} profile for '{layer_key}' needs at least 2 batches, got {}",
            estimates.len()
        )));
    }
    estimates
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.layer_key != layer_key {
                Err(Error::config(format!(
                    "{what} estimate {i} is for layer '{}', expected '{layer_key}'",
                    e.layer_key
                )))
            } else if e.empty {
                Err(Error::data(format!(
                    "{what} estimate {i} for '{layer_key}' has no positive activations"
                )))
            } else if !e.entropy_bits.is_finite() {
                Err(Error::data(format!("{what} estimate {i} is not finite")))
            } else {
                Ok(e.entropy_bits)
            }
        })
        .collect()
}

/// Builds a baseline profile from training batch estimates.
pub fn profile(
    clean_batches: &[EntropyEstimate],
    adversarial_batches: Option<&[EntropyEstimate]>,
    layer_key: &str,
    batch_size: usize,
) -> Result<BaselineProfile> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let clean = check_estimates(clean_batches, layer_key, "clean")?;
    let adversarial = adversarial_batches
        .map(|a| check_estimates(a, layer_key, "adversarial"))
        .transpose()?;
    Ok(BaselineProfile {
        layer_key: layer_key.to_string(),
        clean: SampleStats::of(&clean),
        adversarial: adversarial.as_deref().map(SampleStats::of),
        n_train_batches: clean.len(),
        clean_entropies: clean,
        adversarial_entropies: adversarial,
        batch_size,
    })
}

/// Adversarial side inferred from training means; ties read as below.
pub fn infer_direction(profile: &BaselineProfile) -> Result<Direction> {
    let adv = profile.adversarial_stats()?;
    Ok(if adv.mean > profile.clean.mean {
        Direction::AdversarialAbove
    } else {
        Direction::AdversarialBelow
    })
}

/// Per-layer decision threshold with its training error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionThreshold {
    pub layer_key: String,
    pub tau: f64,
    pub direction: Direction,
    pub source: ThresholdSource,
    pub train_fpr: f64,
    pub train_fnr: f64,
}

/// Default threshold: halfway between the clean extreme and the nearest
/// adversarial extreme on the adversarial side.
pub fn midpoint_threshold(profile: &BaselineProfile) -> Result<DetectionThreshold> {
    let direction = infer_direction(profile)?;
    let adv = profile.adversarial_stats()?;
    let tau = match direction {
        Direction::AdversarialAbove => (profile.clean.max + adv.min) / 2.0,
        Direction::AdversarialBelow => (adv.max + profile.clean.min) / 2.0,
    };
    let (train_fpr, train_fnr) = profile.training_rates(tau, direction)?;
    Ok(DetectionThreshold {
        layer_key: profile.layer_key.clone(),
        tau,
        direction,
        source: ThresholdSource::Midpoint,
        train_fpr,
        train_fnr,
    })
}

/// Minimizes `fnr_weight * FNR + fpr_weight * FPR` over the training
/// samples for the inferred direction.
///
/// The objective is piecewise constant between consecutive distinct sample
/// values, so every gap between neighbours (plus the two unbounded end
/// regions) is scored once. Adjacent optimal gaps merge into a single
/// optimal interval; the widest one wins and its midpoint is returned.
/// Unbounded optimal intervals count as widest and resolve to half the
/// mean sample spacing beyond the outermost sample.
pub fn optimize_threshold(
    profile: &BaselineProfile,
    fpr_weight: f64,
    fnr_weight: f64,
) -> Result<DetectionThreshold> {
    if !(fpr_weight >= 0.0 && fnr_weight >= 0.0) || !fpr_weight.is_finite() || !fnr_weight.is_finite() {
        return Err(Error::config(format!(
            "objective weights must be finite and non-negative, got fpr {fpr_weight}, fnr {fnr_weight}"
        )));
    }
    let direction = infer_direction(profile)?;
    let clean = &profile.clean_entropies;
    let adv = profile.adversarial_samples()?;

    let mut pooled: Vec<f64> = clean.iter().chain(adv).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let m = pooled.len();

    let objective = |tau: f64| {
        let (fpr, fnr) = rates(clean, adv, tau, direction);
        fnr_weight * fnr + fpr_weight * fpr
    };

    let spacing = if m > 1 {
        (pooled[m - 1] - pooled[0]) / (m - 1) as f64
    } else {
        1.0
    };
    // gap g lies between pooled[g-1] and pooled[g]; gaps 0 and m are unbounded
    let probe = |g: usize| -> f64 {
        if g == 0 {
            pooled[0] - spacing / 2.0
        } else if g == m {
            pooled[m - 1] + spacing / 2.0
        } else {
            (pooled[g - 1] + pooled[g]) / 2.0
        }
    };
    let scores: Vec<f64> = (0..=m).map(|g| objective(probe(g))).collect();
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let is_opt = |g: usize| scores[g] <= best + 1e-12;

    let mut chosen: Option<(f64, f64)> = None; // (width, tau)
    let mut g = 0;
    while g <= m {
        if !is_opt(g) {
            g += 1;
            continue;
        }
        let start = g;
        while g < m && is_opt(g + 1) {
            g += 1;
        }
        let end = g;
        let (width, tau) = match (start == 0, end == m) {
            (true, true) => (f64::INFINITY, (pooled[0] + pooled[m - 1]) / 2.0),
            (true, false) => (f64::INFINITY, probe(0)),
            (false, true) => (f64::INFINITY, probe(m)),
            (false, false) => {
                let lo = pooled[start - 1];
                let hi = pooled[end];
                (hi - lo, (lo + hi) / 2.0)
            }
        };
        if chosen.is_none_or(|(w, _)| width > w) {
            chosen = Some((width, tau));
        }
        g += 1;
    }
    let (_, tau) = chosen.expect("at least one gap attains the minimum");
    let (train_fpr, train_fnr) = rates(clean, adv, tau, direction);
    Ok(DetectionThreshold {
        layer_key: profile.layer_key.clone(),
        tau,
        direction,
        source: ThresholdSource::Optimized,
        train_fpr,
        train_fnr,
    })
}
