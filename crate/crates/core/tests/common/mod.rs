//! Reference implementations shared by the integration tests. Each is
//! written independently of the library code it checks.

#![allow(dead_code)]

use entropy_monitor::model::{ImageBatch, ToyCnn};
use entropy_monitor::profile::Direction;

/// Linear-scan histogram of the strictly positive values: bin i holds
/// edges[i] <= v < edges[i+1], the last bin also takes everything at or
/// above the final edge. Returns (entropy in bits, retained count).
pub fn naive_entropy(values: &[f32], edges: &[f64]) -> (f64, u64) {
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let v = v as f64;
        if v <= 0.0 || v < edges[0] {
            continue;
        }
        let mut idx = bins - 1;
        for i in 0..bins {
            if v >= edges[i] && v < edges[i + 1] {
                idx = i;
                break;
            }
        }
        counts[idx] += 1;
    }
    let total: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln() / std::f64::consts::LN_2;
        }
    }
    (h, total)
}

/// Fraction-based error rates by direct counting.
pub fn brute_rates(clean: &[f64], adv: &[f64], tau: f64, dir: Direction) -> (f64, f64) {
    let flagged = |s: f64| match dir {
        Direction::AdversarialAbove => s > tau,
        Direction::AdversarialBelow => s < tau,
    };
    let fp = clean.iter().filter(|&&s| flagged(s)).count() as f64 / clean.len() as f64;
    let fn_ = adv.iter().filter(|&&s| !flagged(s)).count() as f64 / adv.len() as f64;
    (fp, fn_)
}

/// Smallest weighted objective over an evenly spaced grid of `points`
/// thresholds spanning one unit beyond the sample range on each side.
pub fn grid_minimum(clean: &[f64], adv: &[f64], dir: Direction, w_fpr: f64, w_fnr: f64, points: usize) -> f64 {
    let lo = clean.iter().chain(adv).copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = clean.iter().chain(adv).copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let mut best = f64::INFINITY;
    for k in 0..points {
        let tau = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let (fpr, fnr) = brute_rates(clean, adv, tau, dir);
        best = best.min(w_fpr * fpr + w_fnr * fnr);
    }
    // the sample values themselves are also candidate thresholds
    for &tau in clean.iter().chain(adv) {
        let (fpr, fnr) = brute_rates(clean, adv, tau, dir);
        best = best.min(w_fpr * fpr + w_fnr * fnr);
    }
    best
}

/// Outcome of a central-difference check of the analytic input gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn relu_masks(model: &ToyCnn, images: &ImageBatch) -> Vec<bool> {
    let (_, taps) = model.forward(images).unwrap();
    taps.values().flat_map(|t| t.values().iter().map(|&v| v > 0.0)).collect()
}

/// Compares every input coordinate's analytic derivative with
/// `(L(x+h) - L(x-h)) / 2h`. Coordinates whose perturbation flips a ReLU
/// on either tapped layer sit on a kink of the loss and are skipped.
pub fn gradient_check(model: &ToyCnn, images: &ImageBatch, labels: &[usize], h: f64) -> GradCheck {
    let (_, grad) = model.loss_and_input_gradient(images, labels).unwrap();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for k in 0..images.data.len() {
        let mut plus = images.clone();
        plus.data[k] += h;
        let mut minus = images.clone();
        minus.data[k] -= h;
        if relu_masks(model, &plus) != relu_masks(model, &minus) {
            out.skipped += 1;
            continue;
        }
        let lp = model.loss_and_input_gradient(&plus, labels).unwrap().0;
        let lm = model.loss_and_input_gradient(&minus, labels).unwrap().0;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad.data[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        out.max_rel_err = out.max_rel_err.max(rel);
        out.checked += 1;
    }
    out
}

/// Exact minimum of the weighted objective: it only changes at sample
/// values, so the samples, their pairwise midpoints and both far ends
/// cover every constant piece.
pub fn exact_minimum(clean: &[f64], adv: &[f64], dir: Direction, w_fpr: f64, w_fnr: f64) -> f64 {
    let mut pts: Vec<f64> = clean.iter().chain(adv).copied().collect();
    pts.sort_by(f64::total_cmp);
    let mut cands = vec![pts[0] - 1.0, pts[pts.len() - 1] + 1.0];
    cands.extend(pts.iter().copied());
    cands.extend(pts.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cands
        .into_iter()
        .map(|tau| {
            let (fpr, fnr) = brute_rates(clean, adv, tau, dir);
            w_fpr * fpr + w_fnr * fnr
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn estimates(layer: &str, values: &[f64]) -> Vec<entropy_monitor::entropy::EntropyEstimate> {
    values
        .iter()
        .map(|&v| entropy_monitor::entropy::EntropyEstimate {
            layer_key: layer.to_string(),
            entropy_bits: v,
            sample_count: 1,
            empty: false,
        })
        .collect()
}
