//! Histogram-based Shannon entropy of layer activations.
//!
//! A batch of activations for one layer is flattened into a single pool,
//! restricted to strictly positive values, binned with the layer's
//! non-uniform edges and reduced to one entropy value in bits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tap key of the early convolutional layer.
pub const EARLY_CONV_LAYER: &str = "features.0";
/// Tap key of the pre-classification fully connected layer.
pub const PRE_CLASSIFIER_LAYER: &str = "classifier.3";

/// Strictly increasing, finite histogram bin edges (at least two).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct BinEdges(Vec<f64>);

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::config(format!(
                "bin edges need at least 2 values, got {}",
                edges.len()
            )));
        }
        if let Some(bad) = edges.iter().find(|e| !e.is_finite()) {
            return Err(Error::config(format!("non-finite bin edge {bad}")));
        }
        if let Some(i) = edges.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "bin edges not strictly increasing at index {}: {} >= {}",
                i,
                edges[i],
                edges[i + 1]
            )));
        }
        Ok(BinEdges(edges))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin_count(&self) -> usize {
        self.0.len() - 1
    }

    /// Bin index for `v`: left-closed bins, last bin closed and absorbing
    /// everything above the last edge. `None` below the first edge.
    pub fn locate(&self, v: f64) -> Option<usize> {
        let edges = &self.0;
        if v < edges[0] {
            return None;
        }
        let upper = edges.partition_point(|&e| e <= v);
        Some((upper - 1).min(self.bin_count() - 1))
    }
}

impl<'de> Deserialize<'de> for BinEdges {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        BinEdges::new(raw).map_err(serde::de::Error::custom)
    }
}

/// `n` evenly spaced values over `[start, stop]`, both endpoints included.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            let mut out: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
            out[n - 1] = stop;
            out
        }
    }
}

/// Per-layer bin edges keyed by tap name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub layers: BTreeMap<String, BinEdges>,
}

impl BinningScheme {
    pub fn edges(&self, layer_key: &str) -> Result<&BinEdges> {
        self.layers
            .get(layer_key)
            .ok_or_else(|| Error::config(format!("no bin edges for layer '{layer_key}'")))
    }

    /// Loads a scheme from a TOML file with a `[layers]` table mapping each
    /// layer key to an edge array.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scheme: BinningScheme =
            toml::from_str(text).map_err(|e| Error::config(format!("bin scheme: {e}")))?;
        if scheme.layers.is_empty() {
            return Err(Error::config("bin scheme defines no layers"));
        }
        Ok(scheme)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("bin scheme serializes")
    }
}

/// The two adaptive edge lists used by the monitor.
///
/// `features.0`: 16 edges over [0, 0.3], 15 over [0.34, 0.9], 6 over
/// [1.083, 2.0], 3 over [2.67, 4.0] and a final catch-all edge at 7.0
/// (41 edges, 40 bins). `classifier.3`: 20 edges over [0, 2], 3 over
/// [2.001, 4.0] and 7.0 (24 edges, 23 bins).
pub fn build_default_binning() -> BinningScheme {
    let conv: Vec<f64> = [
        linspace(0.0, 0.3, 16),
        linspace(0.3 + 0.04, 0.9, 15),
        linspace(0.9 + 0.183, 2.0, 6),
        linspace(2.0 + 0.67, 4.0, 3),
        vec![7.0],
    ]
    .concat();
    let fc: Vec<f64> = [
        linspace(0.0, 2.0, 20),
        linspace(2.0 + 0.001, 4.0, 3),
        vec![7.0],
    ]
    .concat();

    let mut layers = BTreeMap::new();
    layers.insert(
        EARLY_CONV_LAYER.to_string(),
        BinEdges::new(dedup_sorted(conv)).expect("default conv edges are strictly increasing"),
    );
    layers.insert(
        PRE_CLASSIFIER_LAYER.to_string(),
        BinEdges::new(dedup_sorted(fc)).expect("default fc edges are strictly increasing"),
    );
    BinningScheme { layers }
}

fn dedup_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.dedup();
    v
}

/// Dense activation tensor for one layer of one batch, batch dimension first.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    layer_key: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ActivationBatch {
    pub fn new(layer_key: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let layer_key = layer_key.into();
        if shape.is_empty() {
            return Err(Error::data("activation shape must have at least one dimension"));
        }
        if shape.contains(&0) {
            return Err(Error::data(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::data(format!("shape {shape:?} overflows")))?;
        if expected != values.len() {
            return Err(Error::data(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite activation {} at flat index {} in layer '{}'",
                values[i], i, layer_key
            )));
        }
        Ok(ActivationBatch {
            layer_key,
            shape,
            values,
        })
    }

    pub fn layer_key(&self) -> &str {
        &self.layer_key
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }
}

/// Histogram over fixed edges with normalized probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityHistogram {
    pub bin_edges: BinEdges,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    /// Values below the first edge, excluded from `counts`.
    pub underflow: u64,
}

impl ProbabilityHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Bins `values` with `edges`: bin `i` holds `edges[i] <= v < edges[i+1]`,
/// values at or above the last edge land in the last bin and values below
/// the first edge are tallied in `underflow`.
pub fn bin_values(values: &[f64], edges: &BinEdges) -> Result<ProbabilityHistogram> {
    let mut counts = vec![0u64; edges.bin_count()];
    let mut underflow = 0u64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::data(format!("cannot bin non-finite value {v}")));
        }
        match edges.locate(v) {
            Some(i) => counts[i] += 1,
            None => underflow += 1,
        }
    }
    Ok(histogram_from_counts(edges.clone(), counts, underflow))
}

fn histogram_from_counts(bin_edges: BinEdges, counts: Vec<u64>, underflow: u64) -> ProbabilityHistogram {
    let total: u64 = counts.iter().sum();
    let probabilities = if total == 0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    ProbabilityHistogram {
        bin_edges,
        counts,
        probabilities,
        underflow,
    }
}

/// Shannon entropy in bits of the histogram's probabilities. Empty
/// histograms have zero entropy.
pub fn shannon_entropy(hist: &ProbabilityHistogram) -> f64 {
    entropy_bits(&hist.probabilities)
}

/// `-sum p log2 p` over the positive entries of `probabilities`.
pub fn entropy_bits(probabilities: &[f64]) -> f64 {
    // Neumaier-compensated sum
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &p in probabilities {
        if p > 0.0 {
            let term = -p * p.log2();
            let t = s + term;
            c += if s.abs() >= term.abs() { (s - t) + term } else { (term - t) + s };
            s = t;
        }
    }
    // -0.0 for a single certain bin
    (s + c).max(0.0)
}

/// One batch-level entropy value for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub layer_key: String,
    pub entropy_bits: f64,
    /// Number of strictly positive activations that entered the histogram.
    pub sample_count: u64,
    /// True when the batch had no positive activations at all.
    pub empty: bool,
}

/// Pools every activation in the batch, keeps the strictly positive ones,
/// bins them with the layer's edges and returns their entropy.
pub fn batch_entropy(batch: &ActivationBatch, scheme: &BinningScheme) -> Result<EntropyEstimate> {
    let edges = scheme.edges(batch.layer_key())?;
    let mut counts = vec![0u64; edges.bin_count()];
    let mut retained = 0u64;
    for &v in batch.values() {
        if !v.is_finite() {
            return Err(Error::data(format!(
                "non-finite activation in layer '{}'",
                batch.layer_key()
            )));
        }
        if v > 0.0 {
            // first edge may be above zero for custom schemes
            if let Some(i) = edges.locate(v as f64) {
                counts[i] += 1;
                retained += 1;
            }
        }
    }
    let hist = histogram_from_counts(edges.clone(), counts, 0);
    Ok(EntropyEstimate {
        layer_key: batch.layer_key().to_string(),
        entropy_bits: shannon_entropy(&hist),
        sample_count: retained,
        empty: retained == 0,
    })
}
