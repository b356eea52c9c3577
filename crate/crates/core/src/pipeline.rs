//! End-to-end stages: the synthetic demo, manifest-driven profiling,
//! calibration and detection, and the report they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{classify_batch, evaluate_labels, fuse_scores, DetectionMetrics, Label};
use crate::dump::{BatchLabel, ManifestBatch, RunManifest};
use crate::entropy::{
    batch_entropy, ActivationBatch, BinningScheme, EntropyEstimate, EARLY_CONV_LAYER, PRE_CLASSIFIER_LAYER,
};
use crate::error::{Error, Result, StageExt};
use crate::model::{
    fgsm, generate_dataset, init_prototype_model, predictions, softmax, DatasetSpec, ModelConfig,
};
use crate::profile::{
    midpoint_threshold, optimize_threshold, profile, BaselineProfile, DetectionThreshold, ThresholdSource,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const STORE_FORMAT_VERSION: u32 = 1;

/// Settings for the synthetic end-to-end run. Every field has a default so
/// a config file may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub seed: u64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub train_batches: usize,
    pub test_batches: usize,
    pub layers: Vec<String>,
    pub n_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub contrast: f64,
    pub fpr_weight: f64,
    pub fnr_weight: f64,
    /// Per-layer fusion weights, aligned with `layers`; equal when absent.
    pub fusion_weights: Option<Vec<f64>>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 42,
            epsilon: 0.2,
            batch_size: 16,
            train_batches: 18,
            test_batches: 5,
            layers: vec![EARLY_CONV_LAYER.to_string(), PRE_CLASSIFIER_LAYER.to_string()],
            n_classes: 4,
            channels: 1,
            image_size: 16,
            noise_level: 0.25,
            contrast: 0.12,
            fpr_weight: 1.0,
            fnr_weight: 1.0,
            fusion_weights: None,
        }
    }
}

impl DemoConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.n_classes,
            channels: self.channels,
            height: self.image_size,
            width: self.image_size,
            ..ModelConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.train_batches < 2 {
            return Err(Error::config("need at least 2 training batches"));
        }
        if self.test_batches == 0 {
            return Err(Error::config("need at least 1 test batch"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("no layers selected"));
        }
        for l in &self.layers {
            if l != EARLY_CONV_LAYER && l != PRE_CLASSIFIER_LAYER {
                return Err(Error::config(format!(
                    "toy model has no tap '{l}' (available: {EARLY_CONV_LAYER}, {PRE_CLASSIFIER_LAYER})"
                )));
            }
        }
        if let Some(w) = &self.fusion_weights {
            if w.len() != self.layers.len() {
                return Err(Error::config("fusion weights must align with layers"));
            }
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.train_batches + self.test_batches
    }
}

/// Effective settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub bins: String,
    pub batch_size: usize,
    pub train_batches: Option<usize>,
    pub test_batches: Option<usize>,
    pub layers: Vec<String>,
    pub fpr_weight: Option<f64>,
    pub fnr_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum BatchOutcome {
    Classified { entropy_bits: f64, label: Label },
    /// No positive activations reached the histogram.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchVerdict {
    pub batch_id: u64,
    pub truth: BatchLabel,
    #[serde(flatten)]
    pub outcome: BatchOutcome,
}

/// Threshold, held-out verdicts and metrics for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub threshold: DetectionThreshold,
    /// Present when at least one classified batch has known ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<DetectionMetrics>,
    pub verdicts: Vec<BatchVerdict>,
}

impl LayerReport {
    fn new(threshold: DetectionThreshold, verdicts: Vec<BatchVerdict>) -> Result<Self> {
        let metrics = metrics_from_verdicts(&verdicts)?;
        Ok(LayerReport {
            threshold,
            metrics,
            verdicts,
        })
    }
}

/// Confusion metrics over the classified verdicts with known truth.
pub fn metrics_from_verdicts(verdicts: &[BatchVerdict]) -> Result<Option<DetectionMetrics>> {
    let (pred, truth): (Vec<Label>, Vec<Label>) = verdicts
        .iter()
        .filter_map(|v| match (v.outcome, v.truth.known()) {
            (BatchOutcome::Classified { label, .. }, Some(t)) => Some((label, t)),
            _ => None,
        })
        .unzip();
    if pred.is_empty() {
        Ok(None)
    } else {
        evaluate_labels(&pred, &truth).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub batch_id: u64,
    pub truth: BatchLabel,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedReport {
    pub layers: Vec<String>,
    pub weights: Vec<f64>,
    pub scores: Vec<FusedScore>,
}

/// Classification behaviour of the monitored model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n_images: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub clean_confidence: f64,
    pub adversarial_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub format_version: u32,
    pub config: ConfigEcho,
    pub model: Option<ModelSummary>,
    pub layers: Vec<LayerReport>,
    pub fused: Option<FusedReport>,
}

impl DetectionReport {
    pub fn layer(&self, layer_key: &str, source: ThresholdSource) -> Option<&LayerReport> {
        self.layers
            .iter()
            .find(|l| l.threshold.layer_key == layer_key && l.threshold.source == source)
    }

    /// Checks every summary metric against recomputation from its verdicts.
    pub fn verify(&self) -> Result<()> {
        for l in &self.layers {
            let recomputed = metrics_from_verdicts(&l.verdicts)?;
            if recomputed != l.metrics {
                return Err(Error::data(format!(
                    "metrics for '{}' ({:?}) disagree with its verdicts",
                    l.threshold.layer_key, l.threshold.source
                )));
            }
            for v in &l.verdicts {
                if let BatchOutcome::Classified { entropy_bits, label } = v.outcome {
                    let expected = if l.threshold.direction.is_adversarial(entropy_bits, l.threshold.tau) {
                        Label::Adversarial
                    } else {
                        Label::Clean
                    };
                    if expected != label {
                        return Err(Error::data(format!(
                            "batch {} label disagrees with threshold for '{}'",
                            v.batch_id, l.threshold.layer_key
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("report: {e}")))
    }

    /// Plain-text table of per-layer detection results.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.model {
            let _ = writeln!(out, "{:<12} {:>9} {:>11}", "inputs", "accuracy", "confidence");
            let _ = writeln!(out, "{:<12} {:>9.4} {:>11.4}", "clean", m.clean_accuracy, m.clean_confidence);
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>11.4}\n",
                "adversarial", m.adversarial_accuracy, m.adversarial_confidence
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:<18} {:>9} {:>9} {:>6} {:>6}",
            "layer", "source", "direction", "tau", "accuracy", "FPR", "FNR"
        );
        for l in &self.layers {
            let t = &l.threshold;
            let (acc, fpr, fnr) = match &l.metrics {
                Some(m) => (
                    format!("{:.2}", m.accuracy),
                    format!("{:.2}", m.fpr),
                    format!("{:.2}", m.fnr),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<14} {:<10} {:<18} {:>9.4} {:>9} {:>6} {:>6}",
                t.layer_key,
                format!("{:?}", t.source).to_lowercase(),
                format!("{:?}", t.direction),
                t.tau,
                acc,
                fpr,
                fnr
            );
        }
        out
    }
}

/// Baseline profiles persisted between `profile` and `calibrate`/`detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub format_version: u32,
    pub bins: String,
    pub profiles: Vec<BaselineProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStore {
    pub format_version: u32,
    pub thresholds: Vec<DetectionThreshold>,
}

macro_rules! json_store {
    ($t:ty, $what:literal) => {
        impl $t {
            pub fn to_json(&self) -> String {
                serde_json::to_string_pretty(self).expect("store serializes") + "\n"
            }

            pub fn from_json(text: &str) -> Result<Self> {
                let s: Self =
                    serde_json::from_str(text).map_err(|e| Error::format(format!("{}: {e}", $what)))?;
                if s.format_version != STORE_FORMAT_VERSION {
                    return Err(Error::Compatibility(format!(
                        "{} format version {} unsupported",
                        $what, s.format_version
                    )));
                }
                Ok(s)
            }

            pub fn load(path: &Path) -> Result<Self> {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::from_json(&text)
            }

            pub fn save(&self, path: &Path) -> Result<()> {
                std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
            }
        }
    };
}

json_store!(ProfileStore, "profile store");
json_store!(ThresholdStore, "threshold store");

impl ProfileStore {
    pub fn get(&self, layer_key: &str) -> Option<&BaselineProfile> {
        self.profiles.iter().find(|p| p.layer_key == layer_key)
    }
}

impl ThresholdStore {
    pub fn get(&self, layer_key: &str) -> Option<&DetectionThreshold> {
        self.thresholds.iter().find(|t| t.layer_key == layer_key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Midpoint,
    Optimized,
}

/// Per-layer thresholds from stored profiles.
pub fn calibrate(
    store: &ProfileStore,
    method: CalibrationMethod,
    fpr_weight: f64,
    fnr_weight: f64,
) -> Result<ThresholdStore> {
    if store.profiles.is_empty() {
        return Err(Error::calibration("profile store is empty"));
    }
    let thresholds = store
        .profiles
        .iter()
        .map(|p| match method {
            CalibrationMethod::Midpoint => midpoint_threshold(p),
            CalibrationMethod::Optimized => optimize_threshold(p, fpr_weight, fnr_weight),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdStore {
        format_version: STORE_FORMAT_VERSION,
        thresholds,
    })
}

/// Entropy of every selected layer for one manifest batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntropies {
    pub batch_id: u64,
    pub truth: BatchLabel,
    pub estimates: BTreeMap<String, EntropyEstimate>,
}

/// Reads every dump in the manifest and computes per-layer entropies.
/// Batches are processed in parallel; output order follows the manifest.
pub fn manifest_entropies(
    manifest: &RunManifest,
    scheme: &BinningScheme,
    layers: &[String],
) -> Result<Vec<BatchEntropies>> {
    if manifest.batches.is_empty() {
        return Err(Error::config("manifest lists no batches"));
    }
    for l in layers {
        scheme.edges(l)?;
    }
    manifest
        .batches
        .par_iter()
        .map(|b: &ManifestBatch| {
            let mut estimates = BTreeMap::new();
            for l in layers {
                let act = manifest.load_batch(b, l)?;
                estimates.insert(l.clone(), batch_entropy(&act, scheme)?);
            }
            Ok(BatchEntropies {
                batch_id: b.batch_id,
                truth: b.label,
                estimates,
            })
        })
        .collect()
}

/// Layers to process: the explicit selection, else every layer the
/// manifest references.
pub fn select_layers(manifest: &RunManifest, requested: Option<&[String]>) -> Vec<String> {
    match requested {
        Some(r) if !r.is_empty() => r.to_vec(),
        _ => manifest.layer_keys().into_iter().collect(),
    }
}

/// Baseline profiles from a labelled training manifest. Clean batches form
/// the reference distribution; adversarial batches, when present, are kept
/// for calibration. Unknown-label batches are ignored.
pub fn profile_manifest(
    manifest: &RunManifest,
    scheme: &BinningScheme,
    layers: &[String],
    bins_id: &str,
) -> Result<ProfileStore> {
    let entropies = manifest_entropies(manifest, scheme, layers)?;
    let mut profiles = Vec::new();
    for l in layers {
        let pick = |label: BatchLabel| -> Vec<EntropyEstimate> {
            entropies
                .iter()
                .filter(|b| b.truth == label)
                .map(|b| b.estimates[l].clone())
                .collect()
        };
        let clean = pick(BatchLabel::Clean);
        let adv = pick(BatchLabel::Adversarial);
        let adv = if adv.is_empty() { None } else { Some(adv.as_slice()) };
        profiles.push(profile(&clean, adv, l, manifest.batch_size)?);
    }
    Ok(ProfileStore {
        format_version: STORE_FORMAT_VERSION,
        bins: bins_id.to_string(),
        profiles,
    })
}

fn verdict_for(batch_id: u64, truth: BatchLabel, est: &EntropyEstimate, t: &DetectionThreshold) -> Result<BatchVerdict> {
    let outcome = if est.empty {
        BatchOutcome::Degenerate
    } else {
        let v = classify_batch(est, t)?;
        BatchOutcome::Classified {
            entropy_bits: v.entropy_bits,
            label: v.label,
        }
    };
    Ok(BatchVerdict {
        batch_id,
        truth,
        outcome,
    })
}

fn fused_report(
    batches: &[BatchEntropies],
    profiles: &[BaselineProfile],
    weights: &[f64],
) -> Result<FusedReport> {
    let layers: Vec<String> = profiles.iter().map(|p| p.layer_key.clone()).collect();
    let mut scores = Vec::new();
    for b in batches {
        let ests: Vec<EntropyEstimate> = layers.iter().map(|l| b.estimates[l].clone()).collect();
        if ests.iter().any(|e| e.empty) {
            continue;
        }
        scores.push(FusedScore {
            batch_id: b.batch_id,
            truth: b.truth,
            score: fuse_scores(&ests, profiles, weights)?,
        });
    }
    Ok(FusedReport {
        layers,
        weights: weights.to_vec(),
        scores,
    })
}

/// Applies stored thresholds to every batch of a manifest.
///
/// Fused scores are added when profiles with adversarial statistics are
/// supplied for every selected layer.
pub fn run_detect(
    manifest: &RunManifest,
    scheme: &BinningScheme,
    bins_id: &str,
    profiles: Option<&ProfileStore>,
    thresholds: &ThresholdStore,
    layers: &[String],
) -> Result<DetectionReport> {
    if manifest.batches.is_empty() {
        return Err(Error::config("manifest lists no batches"));
    }
    if layers.is_empty() {
        return Err(Error::config("no layers selected"));
    }
    for l in layers {
        if thresholds.get(l).is_none() {
            return Err(Error::config(format!("no threshold for layer '{l}'")));
        }
    }
    let entropies = manifest_entropies(manifest, scheme, layers)?;

    let mut reports = Vec::new();
    for l in layers {
        let t = thresholds.get(l).expect("coverage checked");
        let verdicts = entropies
            .iter()
            .map(|b| verdict_for(b.batch_id, b.truth, &b.estimates[l], t))
            .collect::<Result<Vec<_>>>()?;
        reports.push(LayerReport::new(t.clone(), verdicts)?);
    }

    let fused = match profiles {
        Some(store) => {
            let selected: Option<Vec<BaselineProfile>> = layers
                .iter()
                .map(|l| store.get(l).filter(|p| p.adversarial.is_some()).cloned())
                .collect();
            match selected {
                Some(p) => {
                    let w = vec![1.0 / p.len() as f64; p.len()];
                    Some(fused_report(&entropies, &p, &w)?)
                }
                None => None,
            }
        }
        None => None,
    };

    Ok(DetectionReport {
        format_version: REPORT_FORMAT_VERSION,
        config: ConfigEcho {
            seed: None,
            epsilon: None,
            bins: bins_id.to_string(),
            batch_size: manifest.batch_size,
            train_batches: None,
            test_batches: None,
            layers: layers.to_vec(),
            fpr_weight: None,
            fnr_weight: None,
        },
        model: None,
        layers: reports,
        fused,
    })
}

/// One batch of the demo run, clean and attacked.
#[derive(Debug, Clone)]
pub struct DemoBatch {
    pub index: usize,
    pub clean: BTreeMap<String, EntropyEstimate>,
    pub adversarial: BTreeMap<String, EntropyEstimate>,
    /// Tapped activations, kept only when requested.
    pub clean_taps: Option<BTreeMap<String, ActivationBatch>>,
    pub adversarial_taps: Option<BTreeMap<String, ActivationBatch>>,
}

#[derive(Debug, Clone)]
pub struct DemoRun {
    pub config: DemoConfig,
    pub report: DetectionReport,
    pub profiles: ProfileStore,
    pub thresholds: ThresholdStore,
    pub batches: Vec<DemoBatch>,
}

impl DemoRun {
    /// Batch id used for clean batch `i` in reports and manifests.
    pub fn clean_id(&self, i: usize) -> u64 {
        i as u64
    }

    /// Batch id used for the attacked copy of batch `i`.
    pub fn adversarial_id(&self, i: usize) -> u64 {
        (self.config.total_batches() + i) as u64
    }

    /// `batch_id,split,truth,layer,entropy_bits,sample_count` for every batch.
    pub fn entropies_csv(&self) -> String {
        let mut out = String::from("batch_id,split,truth,layer,entropy_bits,sample_count\n");
        for b in &self.batches {
            let split = if b.index < self.config.train_batches { "train" } else { "test" };
            for (truth, id, ests) in [
                ("clean", self.clean_id(b.index), &b.clean),
                ("adversarial", self.adversarial_id(b.index), &b.adversarial),
            ] {
                for l in &self.config.layers {
                    let e = &ests[l];
                    let _ = writeln!(out, "{id},{split},{truth},{l},{:.10},{}", e.entropy_bits, e.sample_count);
                }
            }
        }
        out
    }

    /// Histogram of batch entropies for one layer, clean against attacked.
    pub fn histogram_csv(&self, layer: &str, bins: usize) -> Result<String> {
        let clean: Vec<f64> = self.batches.iter().map(|b| b.clean[layer].entropy_bits).collect();
        let adv: Vec<f64> = self.batches.iter().map(|b| b.adversarial[layer].entropy_bits).collect();
        entropy_histogram_csv(&clean, &adv, bins)
    }
}

/// Equal-width histogram CSV (`bin_lower,bin_upper,clean,adversarial`) over
/// the pooled range of both entropy samples.
pub fn entropy_histogram_csv(clean: &[f64], adversarial: &[f64], bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let all = clean.iter().chain(adversarial);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::data("no entropy values to histogram"));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let index = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut counts = vec![(0usize, 0usize); bins];
    clean.iter().for_each(|&v| counts[index(v)].0 += 1);
    adversarial.iter().for_each(|&v| counts[index(v)].1 += 1);
    let mut out = String::from("bin_lower,bin_upper,clean,adversarial\n");
    for (i, (c, a)) in counts.into_iter().enumerate() {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{c},{a}",
            lo + width * i as f64,
            lo + width * (i + 1) as f64
        );
    }
    Ok(out)
}

/// Histogram CSVs and per-batch entropies for a labelled manifest.
pub fn manifest_plot_data(entropies: &[BatchEntropies], layer: &str, bins: usize) -> Result<String> {
    let pick = |label: BatchLabel| -> Vec<f64> {
        entropies
            .iter()
            .filter(|b| b.truth == label && !b.estimates[layer].empty)
            .map(|b| b.estimates[layer].entropy_bits)
            .collect()
    };
    entropy_histogram_csv(&pick(BatchLabel::Clean), &pick(BatchLabel::Adversarial), bins)
}

struct BatchOutput {
    clean_correct: usize,
    adv_correct: usize,
    clean_conf: f64,
    adv_conf: f64,
    batch: DemoBatch,
}

/// Runs the full synthetic reproduction: dataset, model, attack, entropy
/// profiling, calibration and held-out detection.
pub fn run_demo(config: &DemoConfig, scheme: &BinningScheme, bins_id: &str, keep_taps: bool) -> Result<DemoRun> {
    config.validate().stage("configure")?;
    for l in &config.layers {
        scheme.edges(l).stage("configure")?;
    }
    let model_cfg = config.model_config();
    let n_images = config.batch_size * config.total_batches();
    let spec = DatasetSpec {
        noise_level: config.noise_level,
        contrast: config.contrast,
        ..DatasetSpec::new(config.seed, n_images, &model_cfg)
    };
    let data = generate_dataset(&spec).stage("generate dataset")?;
    let model = init_prototype_model(config.seed, model_cfg).stage("build model")?;

    let outputs: Vec<BatchOutput> = (0..config.total_batches())
        .into_par_iter()
        .map(|i| -> Result<BatchOutput> {
            let (start, end) = (i * config.batch_size, (i + 1) * config.batch_size);
            let images = data.images.slice(start, end);
            let labels = &data.labels[start..end];
            let (logits, taps) = model.forward(&images).stage("forward clean")?;
            let (_, grad) = model
                .loss_and_input_gradient(&images, labels)
                .stage("input gradient")?;
            let adv_images = fgsm(&images, &grad, config.epsilon).stage("attack")?;
            let (adv_logits, adv_taps) = model.forward(&adv_images).stage("forward adversarial")?;

            let score = |logits: &[f64]| -> (usize, f64) {
                let preds = predictions(logits, model_cfg.n_classes);
                let correct = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
                let conf = logits
                    .chunks(model_cfg.n_classes)
                    .map(|row| softmax(row).into_iter().fold(0.0, f64::max))
                    .sum::<f64>();
                (correct, conf)
            };
            let (clean_correct, clean_conf) = score(&logits);
            let (adv_correct, adv_conf) = score(&adv_logits);

            let entropies = |taps: &BTreeMap<String, ActivationBatch>| -> Result<BTreeMap<String, EntropyEstimate>> {
                config
                    .layers
                    .iter()
                    .map(|l| Ok((l.clone(), batch_entropy(&taps[l], scheme)?)))
                    .collect()
            };
            let clean = entropies(&taps).stage("entropy")?;
            let adversarial = entropies(&adv_taps).stage("entropy")?;
            Ok(BatchOutput {
                clean_correct,
                adv_correct,
                clean_conf,
                adv_conf,
                batch: DemoBatch {
                    index: i,
                    clean,
                    adversarial,
                    clean_taps: keep_taps.then_some(taps),
                    adversarial_taps: keep_taps.then_some(adv_taps),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = n_images as f64;
    let summary = ModelSummary {
        n_images,
        clean_accuracy: outputs.iter().map(|o| o.clean_correct).sum::<usize>() as f64 / n,
        adversarial_accuracy: outputs.iter().map(|o| o.adv_correct).sum::<usize>() as f64 / n,
        clean_confidence: outputs.iter().map(|o| o.clean_conf).sum::<f64>() / n,
        adversarial_confidence: outputs.iter().map(|o| o.adv_conf).sum::<f64>() / n,
    };
    let batches: Vec<DemoBatch> = outputs.into_iter().map(|o| o.batch).collect();
    let (train, test) = batches.split_at(config.train_batches);

    let mut profiles = Vec::new();
    for l in &config.layers {
        let clean: Vec<EntropyEstimate> = train.iter().map(|b| b.clean[l].clone()).collect();
        let adv: Vec<EntropyEstimate> = train.iter().map(|b| b.adversarial[l].clone()).collect();
        profiles.push(profile(&clean, Some(&adv), l, config.batch_size).stage("profile")?);
    }

    let total = config.total_batches() as u64;
    let mut test_batches = Vec::new();
    for b in test {
        test_batches.push(BatchEntropies {
            batch_id: b.index as u64,
            truth: BatchLabel::Clean,
            estimates: b.clean.clone(),
        });
    }
    for b in test {
        test_batches.push(BatchEntropies {
            batch_id: total + b.index as u64,
            truth: BatchLabel::Adversarial,
            estimates: b.adversarial.clone(),
        });
    }

    let mut optimized = Vec::new();
    let mut layer_reports = Vec::new();
    for p in &profiles {
        let opt = optimize_threshold(p, config.fpr_weight, config.fnr_weight).stage("calibrate")?;
        let mid = midpoint_threshold(p).stage("calibrate")?;
        for t in [&opt, &mid] {
            let verdicts = test_batches
                .iter()
                .map(|b| verdict_for(b.batch_id, b.truth, &b.estimates[&p.layer_key], t))
                .collect::<Result<Vec<_>>>()
                .stage("detect")?;
            layer_reports.push(LayerReport::new(t.clone(), verdicts).stage("evaluate")?);
        }
        optimized.push(opt);
    }

    let weights = config
        .fusion_weights
        .clone()
        .unwrap_or_else(|| vec![1.0 / profiles.len() as f64; profiles.len()]);
    let fused = fused_report(&test_batches, &profiles, &weights).stage("fuse")?;

    let report = DetectionReport {
        format_version: REPORT_FORMAT_VERSION,
        config: ConfigEcho {
            seed: Some(config.seed),
            epsilon: Some(config.epsilon),
            bins: bins_id.to_string(),
            batch_size: config.batch_size,
            train_batches: Some(config.train_batches),
            test_batches: Some(config.test_batches),
            layers: config.layers.clone(),
            fpr_weight: Some(config.fpr_weight),
            fnr_weight: Some(config.fnr_weight),
        },
        model: Some(summary),
        layers: layer_reports,
        fused: Some(fused),
    };

    Ok(DemoRun {
        config: config.clone(),
        report,
        profiles: ProfileStore {
            format_version: STORE_FORMAT_VERSION,
            bins: bins_id.to_string(),
            profiles,
        },
        thresholds: ThresholdStore {
            format_version: STORE_FORMAT_VERSION,
            thresholds: optimized,
        },
        batches,
    })
}

/// Writes the demo's activations as dump files plus `train.toml` and
/// `test.toml` manifests under `dir`.
pub fn write_demo_dumps(run: &DemoRun, dir: &Path) -> Result<()> {
    let dump_dir = dir.join("dumps");
    std::fs::create_dir_all(&dump_dir).map_err(|e| Error::io(&dump_dir, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for b in &run.batches {
        let (clean_taps, adv_taps) = match (&b.clean_taps, &b.adversarial_taps) {
            (Some(c), Some(a)) => (c, a),
            _ => return Err(Error::config("demo run did not keep activations")),
        };
        for (label, id, taps) in [
            (BatchLabel::Clean, run.clean_id(b.index), clean_taps),
            (BatchLabel::Adversarial, run.adversarial_id(b.index), adv_taps),
        ] {
            let mut files = BTreeMap::new();
            for l in &run.config.layers {
                let name = format!("batch_{id:04}_{l}.admp");
                crate::dump::write_dump_file(&taps[l], &dump_dir.join(&name))?;
                files.insert(l.clone(), Path::new("dumps").join(name));
            }
            let entry = ManifestBatch {
                batch_id: id,
                label,
                files,
            };
            if b.index < run.config.train_batches {
                train.push(entry);
            } else {
                test.push(entry);
            }
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), "demo".to_string());
    metadata.insert("seed".to_string(), run.config.seed.to_string());
    metadata.insert("epsilon".to_string(), run.config.epsilon.to_string());
    for (name, batches) in [("train.toml", train), ("test.toml", test)] {
        let m = RunManifest {
            batch_size: run.config.batch_size,
            metadata: metadata.clone(),
            batches,
            base_dir: dir.to_path_buf(),
        };
        m.save(&dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::build_default_binning;

    fn small_config() -> DemoConfig {
        DemoConfig {
            batch_size: 8,
            train_batches: 4,
            test_batches: 2,
            ..DemoConfig::default()
        }
    }

    #[test]
    fn demo_report_is_self_consistent() {
        let run = run_demo(&small_config(), &build_default_binning(), "default", false).unwrap();
        run.report.verify().unwrap();
        for l in &run.report.layers {
            assert_eq!(l.verdicts.len(), 4);
            assert!(l.metrics.is_some());
        }
        assert_eq!(run.report.layers.len(), 4);
        assert!(run.report.fused.as_ref().unwrap().scores.len() == 4);
    }

    #[test]
    fn verify_catches_tampering() {
        let mut run = run_demo(&small_config(), &build_default_binning(), "default", false).unwrap();
        let m = run.report.layers[0].metrics.as_mut().unwrap();
        m.tp += 1;
        assert!(matches!(run.report.verify(), Err(Error::Data(_))));
    }

    #[test]
    fn demo_config_errors_carry_stage() {
        let cfg = DemoConfig {
            layers: vec!["conv9".into()],
            ..small_config()
        };
        let err = run_demo(&cfg, &build_default_binning(), "default", false).unwrap_err();
        assert!(err.to_string().starts_with("configure:"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn histogram_csv_counts_everything() {
        let csv = entropy_histogram_csv(&[1.0, 1.1, 1.2], &[2.0, 2.1], 4).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        let (c, a) = rows.iter().fold((0, 0), |(c, a), r| {
            let f: Vec<&str> = r.split(',').collect();
            (c + f[2].parse::<usize>().unwrap(), a + f[3].parse::<usize>().unwrap())
        });
        assert_eq!((c, a), (3, 2));
        assert!(entropy_histogram_csv(&[], &[], 4).is_err());
    }

    #[test]
    fn config_file_subset() {
        let cfg: DemoConfig = toml::from_str("seed = 7\nepsilon = 0.1\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.batch_size, 16);
        assert!(toml::from_str::<DemoConfig>("sed = 7").is_err());
    }
}
