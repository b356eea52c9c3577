//! Small deterministic CNN with exact input gradients, a matching synthetic
//! dataset and the fast gradient sign attack.
//!
//! Architecture: 3x3 valid convolution -> ReLU -> 2x2 average pool ->
//! flatten -> FC1 -> ReLU -> FC2 -> softmax. The post-convolution ReLU is
//! tapped as `features.0` and the post-FC1 ReLU as `classifier.3`.
//!
//! All arithmetic is `f64`; tapped activations are narrowed to `f32`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{ActivationBatch, EARLY_CONV_LAYER, PRE_CLASSIFIER_LAYER};
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const POOL: usize = 2;

/// Image tensor `[n, channels, height, width]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * channels * height * width {
            return Err(Error::data(format!(
                "image data has {} values, shape [{n}, {channels}, {height}, {width}] needs {}",
                data.len(),
                n * channels * height * width
            )));
        }
        Ok(ImageBatch {
            n,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(n: usize, channels: usize, height: usize, width: usize) -> Self {
        ImageBatch {
            n,
            channels,
            height,
            width,
            data: vec![0.0; n * channels * height * width],
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Images `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> ImageBatch {
        assert!(start <= end && end <= self.n);
        let len = self.image_len();
        ImageBatch {
            n: end - start,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    fn same_shape(&self, other: &ImageBatch) -> bool {
        (self.n, self.channels, self.height, self.width)
            == (other.n, other.channels, other.height, other.width)
    }
}

/// Static dimensions of a [`ToyCnn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Convolution filters beyond the per-class template filters.
    pub noise_filters: usize,
    /// FC1 units beyond the per-class template units.
    pub extra_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            noise_filters: 4,
            extra_hidden: 12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.channels == 0 {
            return Err(Error::config("need at least one input channel"));
        }
        if self.height < KERNEL + POOL - 1 || self.width < KERNEL + POOL - 1 {
            return Err(Error::config(format!(
                "input {}x{} too small for a {KERNEL}x{KERNEL} convolution and {POOL}x{POOL} pool",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn conv_filters(&self) -> usize {
        self.n_classes + self.noise_filters
    }

    pub fn conv_out(&self) -> (usize, usize) {
        (self.height - KERNEL + 1, self.width - KERNEL + 1)
    }

    pub fn pool_out(&self) -> (usize, usize) {
        let (h, w) = self.conv_out();
        (h / POOL, w / POOL)
    }

    pub fn flat_features(&self) -> usize {
        let (ph, pw) = self.pool_out();
        self.conv_filters() * ph * pw
    }

    pub fn hidden(&self) -> usize {
        self.n_classes + self.extra_hidden
    }
}

/// The toy network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    pub config: ModelConfig,
    /// `[filters, channels, 3, 3]`
    pub conv_filters: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// `[hidden, flat_features]`
    pub fc1_weights: Vec<f64>,
    pub fc1_bias: Vec<f64>,
    /// `[n_classes, hidden]`
    pub fc2_weights: Vec<f64>,
    pub fc2_bias: Vec<f64>,
}

impl ToyCnn {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.conv_filters();
        Ok(ToyCnn {
            conv_filters: vec![0.0; k * config.channels * KERNEL * KERNEL],
            conv_bias: vec![0.0; k],
            fc1_weights: vec![0.0; config.hidden() * config.flat_features()],
            fc1_bias: vec![0.0; config.hidden()],
            fc2_weights: vec![0.0; config.n_classes * config.hidden()],
            fc2_bias: vec![0.0; config.n_classes],
            config,
        })
    }

    /// Every parameter drawn from a zero-mean distribution; used for
    /// gradient verification rather than classification.
    pub fn random(seed: u64, config: ModelConfig) -> Result<Self> {
        let mut m = ToyCnn::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let s_conv = fan(config.channels * KERNEL * KERNEL);
        let s_fc1 = 4.0 * fan(config.flat_features());
        let s_fc2 = 2.0 * fan(config.hidden());
        for w in &mut m.conv_filters {
            *w = rng.gen_range(-1.0..1.0) * s_conv * 2.0;
        }
        for b in &mut m.conv_bias {
            *b = rng.gen_range(-0.2..0.2);
        }
        for w in &mut m.fc1_weights {
            *w = rng.gen_range(-1.0..1.0) * s_fc1;
        }
        for b in &mut m.fc1_bias {
            *b = rng.gen_range(-0.1..0.3);
        }
        for w in &mut m.fc2_weights {
            *w = rng.gen_range(-1.0..1.0) * s_fc2;
        }
        for b in &mut m.fc2_bias {
            *b = rng.gen_range(-0.1..0.1);
        }
        Ok(m)
    }

    fn check_input(&self, images: &ImageBatch) -> Result<()> {
        let c = &self.config;
        if (images.channels, images.height, images.width) != (c.channels, c.height, c.width) {
            return Err(Error::data(format!(
                "images are {}x{}x{}, model expects {}x{}x{}",
                images.channels, images.height, images.width, c.channels, c.height, c.width
            )));
        }
        if images.n == 0 {
            return Err(Error::data("empty image batch"));
        }
        Ok(())
    }

    /// Logits only, no activation capture.
    pub fn logits(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        self.check_input(images)?;
        Ok(self.run(images).logits)
    }

    /// Logits `[n, n_classes]` plus the two tapped post-ReLU activations.
    pub fn forward(&self, images: &ImageBatch) -> Result<(Vec<f64>, BTreeMap<String, ActivationBatch>)> {
        self.check_input(images)?;
        let pass = self.run(images);
        let c = &self.config;
        let (oh, ow) = c.conv_out();
        let mut taps = BTreeMap::new();
        taps.insert(
            EARLY_CONV_LAYER.to_string(),
            ActivationBatch::new(
                EARLY_CONV_LAYER,
                vec![images.n, c.conv_filters(), oh, ow],
                pass.conv_act.iter().map(|&v| v as f32).collect(),
            )?,
        );
        taps.insert(
            PRE_CLASSIFIER_LAYER.to_string(),
            ActivationBatch::new(
                PRE_CLASSIFIER_LAYER,
                vec![images.n, c.hidden()],
                pass.hidden_act.iter().map(|&v| v as f32).collect(),
            )?,
        );
        Ok((pass.logits, taps))
    }

    fn run(&self, images: &ImageBatch) -> Pass {
        let c = &self.config;
        let n = images.n;
        let (h, w) = (c.height, c.width);
        let (oh, ow) = c.conv_out();
        let (ph, pw) = c.pool_out();
        let k = c.conv_filters();
        let ch = c.channels;
        let flat = c.flat_features();
        let hidden = c.hidden();
        let classes = c.n_classes;

        let mut conv_pre = vec![0.0; n * k * oh * ow];
        for m in 0..n {
            let img = &images.data[m * ch * h * w..(m + 1) * ch * h * w];
            for f in 0..k {
                let filt = &self.conv_filters[f * ch * KERNEL * KERNEL..(f + 1) * ch * KERNEL * KERNEL];
                let out = &mut conv_pre[(m * k + f) * oh * ow..(m * k + f + 1) * oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = self.conv_bias[f];
                        for cc in 0..ch {
                            for u in 0..KERNEL {
                                let row = &img[cc * h * w + (i + u) * w + j..];
                                let frow = &filt[(cc * KERNEL + u) * KERNEL..];
                                for v in 0..KERNEL {
                                    acc += frow[v] * row[v];
                                }
                            }
                        }
                        out[i * ow + j] = acc;
                    }
                }
            }
        }
        let conv_act: Vec<f64> = conv_pre.iter().map(|&z| z.max(0.0)).collect();

        let mut pooled = vec![0.0; n * flat];
        let scale = 1.0 / (POOL * POOL) as f64;
        for m in 0..n {
            for f in 0..k {
                let act = &conv_act[(m * k + f) * oh * ow..];
                for pi in 0..ph {
                    for pj in 0..pw {
                        let mut s = 0.0;
                        for di in 0..POOL {
                            for dj in 0..POOL {
                                s += act[(POOL * pi + di) * ow + POOL * pj + dj];
                            }
                        }
                        pooled[m * flat + (f * ph + pi) * pw + pj] = s * scale;
                    }
                }
            }
        }

        let mut hidden_pre = vec![0.0; n * hidden];
        for m in 0..n {
            let x = &pooled[m * flat..(m + 1) * flat];
            for u in 0..hidden {
                let row = &self.fc1_weights[u * flat..(u + 1) * flat];
                hidden_pre[m * hidden + u] =
                    self.fc1_bias[u] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let hidden_act: Vec<f64> = hidden_pre.iter().map(|&z| z.max(0.0)).collect();

        let mut logits = vec![0.0; n * classes];
        for m in 0..n {
            let x = &hidden_act[m * hidden..(m + 1) * hidden];
            for o in 0..classes {
                let row = &self.fc2_weights[o * hidden..(o + 1) * hidden];
                logits[m * classes + o] =
                    self.fc2_bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        Pass {
            conv_pre,
            conv_act,
            hidden_pre,
            hidden_act,
            logits,
        }
    }

    /// Mean cross-entropy (nats) over the batch and its exact gradient with
    /// respect to every input pixel.
    pub fn loss_and_input_gradient(&self, images: &ImageBatch, labels: &[usize]) -> Result<(f64, ImageBatch)> {
        self.check_input(images)?;
        let c = &self.config;
        let classes = c.n_classes;
        if labels.len() != images.n {
            return Err(Error::data(format!("{} labels for {} images", labels.len(), images.n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        let n = images.n;
        let pass = self.run(images);
        let (h, w) = (c.height, c.width);
        let (oh, ow) = c.conv_out();
        let (ph, pw) = c.pool_out();
        let k = c.conv_filters();
        let ch = c.channels;
        let flat = c.flat_features();
        let hidden = c.hidden();

        let mut loss = 0.0;
        let mut d_logits = vec![0.0; n * classes];
        for m in 0..n {
            let z = &pass.logits[m * classes..(m + 1) * classes];
            let probs = softmax(z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[labels[m]];
            for o in 0..classes {
                let onehot = if o == labels[m] { 1.0 } else { 0.0 };
                d_logits[m * classes + o] = (probs[o] - onehot) / n as f64;
            }
        }
        loss /= n as f64;

        let mut d_hidden_pre = vec![0.0; n * hidden];
        for m in 0..n {
            for u in 0..hidden {
                if pass.hidden_pre[m * hidden + u] > 0.0 {
                    let mut g = 0.0;
                    for o in 0..classes {
                        g += self.fc2_weights[o * hidden + u] * d_logits[m * classes + o];
                    }
                    d_hidden_pre[m * hidden + u] = g;
                }
            }
        }

        let mut d_pooled = vec![0.0; n * flat];
        for m in 0..n {
            let out = &mut d_pooled[m * flat..(m + 1) * flat];
            for u in 0..hidden {
                let g = d_hidden_pre[m * hidden + u];
                if g != 0.0 {
                    let row = &self.fc1_weights[u * flat..(u + 1) * flat];
                    for (o, &wt) in out.iter_mut().zip(row) {
                        *o += wt * g;
                    }
                }
            }
        }

        // average-pool backward then ReLU mask; rows/cols outside the pool
        // window (odd conv output) get no gradient
        let scale = 1.0 / (POOL * POOL) as f64;
        let mut d_conv_pre = vec![0.0; n * k * oh * ow];
        for m in 0..n {
            for f in 0..k {
                let base = (m * k + f) * oh * ow;
                for pi in 0..ph {
                    for pj in 0..pw {
                        let g = d_pooled[m * flat + (f * ph + pi) * pw + pj] * scale;
                        for di in 0..POOL {
                            for dj in 0..POOL {
                                let idx = base + (POOL * pi + di) * ow + POOL * pj + dj;
                                if pass.conv_pre[idx] > 0.0 {
                                    d_conv_pre[idx] = g;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut grad = ImageBatch::zeros(n, ch, h, w);
        for m in 0..n {
            let gimg = &mut grad.data[m * ch * h * w..(m + 1) * ch * h * w];
            for f in 0..k {
                let filt = &self.conv_filters[f * ch * KERNEL * KERNEL..(f + 1) * ch * KERNEL * KERNEL];
                let dz = &d_conv_pre[(m * k + f) * oh * ow..(m * k + f + 1) * oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dz[i * ow + j];
                        if g == 0.0 {
                            continue;
                        }
                        for cc in 0..ch {
                            for u in 0..KERNEL {
                                for v in 0..KERNEL {
                                    gimg[cc * h * w + (i + u) * w + j + v] +=
                                        filt[(cc * KERNEL + u) * KERNEL + v] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}

struct Pass {
    conv_pre: Vec<f64>,
    conv_act: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    logits: Vec<f64>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise argmax of an `[n, classes]` logit matrix.
pub fn predictions(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Single-step fast gradient sign perturbation, clipped to [0, 1].
pub fn fgsm(images: &ImageBatch, grad: &ImageBatch, epsilon: f64) -> Result<ImageBatch> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::config(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    if !images.same_shape(grad) {
        return Err(Error::data("gradient shape does not match images"));
    }
    let data = images
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&x, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x + epsilon * s).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImageBatch {
        n: images.n,
        channels: images.channels,
        height: images.height,
        width: images.width,
        data,
    })
}

/// Zero-mean 3x3 class template with peak magnitude 1.
///
/// The first four classes use period-3 stripes along the four lattice
/// directions (rows, columns, diagonal, anti-diagonal). Their cyclic
/// cross-correlations vanish, so a matched filter responds to its own class
/// only. Further classes get seeded random zero-mean patches.
pub fn class_template(class: usize, seed: u64) -> [f64; KERNEL * KERNEL] {
    const PROFILE: [f64; 3] = [1.0, -0.5, -0.5];
    let mut t = [0.0; KERNEL * KERNEL];
    if class < 4 {
        for i in 0..KERNEL {
            for j in 0..KERNEL {
                let phase = match class {
                    0 => i,
                    1 => j,
                    2 => i + j,
                    _ => i + 2 * j,
                };
                t[i * KERNEL + j] = PROFILE[phase % 3];
            }
        }
        return t;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)));
    for v in t.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    t.iter_mut().for_each(|v| *v -= mean);
    let peak = t.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    t.iter_mut().for_each(|v| *v /= peak);
    t
}

/// Generator settings for [`SyntheticDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Half-width of the uniform pixel noise.
    pub noise_level: f64,
    /// Template amplitude around the 0.5 grey level.
    pub contrast: f64,
}

impl DatasetSpec {
    pub fn new(seed: u64, n: usize, config: &ModelConfig) -> Self {
        DatasetSpec {
            seed,
            n,
            n_classes: config.n_classes,
            channels: config.channels,
            height: config.height,
            width: config.width,
            noise_level: 0.25,
            contrast: 0.12,
        }
    }
}

/// Class-prototype images with seeded noise and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub seed: u64,
}

/// Noise-free image of `class`: its template tiled over the frame.
pub fn prototype_image(spec: &DatasetSpec, class: usize) -> Vec<f64> {
    let t = class_template(class, spec.seed);
    let mut img = Vec::with_capacity(spec.channels * spec.height * spec.width);
    for _ in 0..spec.channels {
        for i in 0..spec.height {
            for j in 0..spec.width {
                let v = 0.5 + spec.contrast * t[(i % KERNEL) * KERNEL + j % KERNEL];
                img.push(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    if spec.n_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if spec.n < spec.n_classes {
        return Err(Error::config(format!(
            "{} images cannot cover {} classes",
            spec.n, spec.n_classes
        )));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config("image dimensions must be positive"));
    }
    if !(spec.noise_level >= 0.0 && spec.noise_level.is_finite())
        || !(spec.contrast >= 0.0 && spec.contrast.is_finite())
    {
        return Err(Error::config("noise level and contrast must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.n_classes).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let prototypes: Vec<Vec<f64>> = (0..spec.n_classes).map(|c| prototype_image(spec, c)).collect();
    let len = spec.channels * spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.n * len);
    for &label in &labels {
        for &p in &prototypes[label] {
            let noise = if spec.noise_level > 0.0 {
                rng.gen_range(-spec.noise_level..spec.noise_level)
            } else {
                0.0
            };
            data.push((p + noise).clamp(0.0, 1.0));
        }
    }
    Ok(SyntheticDataset {
        images: ImageBatch::new(spec.n, spec.channels, spec.height, spec.width, data)?,
        labels,
        seed: spec.seed,
    })
}

const CONV_GAIN: f64 = 1.0;
const CLASS_UNIT_GAIN: f64 = 6.0;
const LOGIT_GAIN: f64 = 8.0;

/// Template-matching network for the synthetic dataset.
///
/// Filter `k < n_classes` is class `k`'s template scaled to unit norm; the
/// remaining filters are seeded zero-mean noise detectors. FC1 unit `k`
/// averages filter `k`'s pooled response and FC2 maps it to logit `k`.
/// Extra FC1 units mix all pooled features with small seeded weights and
/// feed the logits weakly.
pub fn init_prototype_model(seed: u64, config: ModelConfig) -> Result<ToyCnn> {
    let mut m = ToyCnn::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let ch = config.channels;
    let patch = ch * KERNEL * KERNEL;
    let channel_scale = 1.0 / (ch as f64).sqrt();

    for f in 0..config.conv_filters() {
        let t = if f < config.n_classes {
            class_template(f, seed)
        } else {
            let mut t = [0.0; KERNEL * KERNEL];
            t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            t.iter_mut().for_each(|v| *v -= mean);
            t
        };
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for cc in 0..ch {
            for (i, &v) in t.iter().enumerate() {
                m.conv_filters[f * patch + cc * KERNEL * KERNEL + i] = CONV_GAIN * channel_scale * v / norm;
            }
        }
    }

    let (ph, pw) = config.pool_out();
    let cells = ph * pw;
    let flat = config.flat_features();
    for k in 0..config.n_classes {
        for c in 0..cells {
            m.fc1_weights[k * flat + k * cells + c] = CLASS_UNIT_GAIN / cells as f64;
        }
    }
    for u in config.n_classes..config.hidden() {
        for w in &mut m.fc1_weights[u * flat..(u + 1) * flat] {
            *w = rng.gen_range(-1.0..1.0) * 4.0 / (flat as f64).sqrt();
        }
        m.fc1_bias[u] = rng.gen_range(0.2..0.8);
    }

    let hidden = config.hidden();
    for o in 0..config.n_classes {
        m.fc2_weights[o * hidden + o] = LOGIT_GAIN;
        for u in config.n_classes..hidden {
            m.fc2_weights[o * hidden + u] = rng.gen_range(-0.1..0.1);
        }
    }
    Ok(m)
}
