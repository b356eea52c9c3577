//! C ABI over `entropy-monitor`.
//!
//! Conventions:
//! - every fallible function returns an [`EmStatus`]; on failure a message is
//!   available from [`em_last_error_message`] on the same thread;
//! - objects are opaque heap handles created by `*_new`/`*_read`/`*_default`
//!   functions and released with the matching `*_free`;
//! - strings are NUL-terminated UTF-8; arrays are pointer plus length.
//!
//! The generated header lives at `include/entropy_monitor.h`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use entropy_monitor::detect::{evaluate_labels, fuse_scores, Label};
use entropy_monitor::dump::{decode_dump, encode_dump, read_dump_file, write_dump_file};
use entropy_monitor::entropy::{
    batch_entropy, build_default_binning, entropy_bits, ActivationBatch, BinningScheme, EntropyEstimate,
};
use entropy_monitor::profile::{
    midpoint_threshold, optimize_threshold, profile, BaselineProfile, DetectionThreshold, Direction,
    SampleStats, ThresholdSource,
};
use entropy_monitor::Error;

/// Result code of every fallible call. Error values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 3,
    Data = 4,
    Format = 5,
    Compatibility = 6,
    Calibration = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmDirection {
    AdversarialBelow = 0,
    AdversarialAbove = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmThresholdSource {
    Midpoint = 0,
    Optimized = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmLabel {
    Clean = 0,
    Adversarial = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EmEntropyEstimate {
    pub entropy_bits: f64,
    pub sample_count: u64,
    pub empty: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EmSampleStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmThreshold {
    pub tau: f64,
    pub direction: EmDirection,
    pub source: EmThresholdSource,
    pub train_fpr: f64,
    pub train_fnr: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EmMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub no_negatives: bool,
    pub no_positives: bool,
}

/// Per-layer bin edges.
pub struct EmBinningScheme {
    inner: BinningScheme,
}

/// One layer's activation tensor.
pub struct EmActivationBatch {
    inner: ActivationBatch,
    key: CString,
}

/// Baseline entropy profile of one layer.
pub struct EmProfile {
    inner: BaselineProfile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Config(_) => EmStatus::Config,
            Error::Data(_) => EmStatus::Data,
            Error::Format(_) => EmStatus::Format,
            Error::Compatibility(_) => EmStatus::Compatibility,
            Error::Calibration(_) => EmStatus::Calibration,
            _ => EmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            EmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EmStatus::Config, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn em_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn em_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in adaptive scheme for `features.0` and `classifier.3`.
#[no_mangle]
pub extern "C" fn em_binning_default() -> *mut EmBinningScheme {
    Box::into_raw(Box::new(EmBinningScheme {
        inner: build_default_binning(),
    }))
}

/// Loads a scheme from a TOML file with a `[layers]` table.
#[no_mangle]
pub unsafe extern "C" fn em_binning_from_toml_file(
    path: *const c_char,
    out: *mut *mut EmBinningScheme,
) -> EmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = BinningScheme::from_toml_file(Path::new(path))?;
        *out = Box::into_raw(Box::new(EmBinningScheme { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn em_binning_free(scheme: *mut EmBinningScheme) {
    if !scheme.is_null() {
        drop(Box::from_raw(scheme));
    }
}

/// Copies the edges for `layer_key` into `buf`. `out_len` always receives
/// the edge count; `EM_STATUS_BUFFER_TOO_SMALL` when `cap` is short.
#[no_mangle]
pub unsafe extern "C" fn em_binning_edges(
    scheme: *const EmBinningScheme,
    layer_key: *const c_char,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> EmStatus {
    guard(|| {
        let scheme = handle(scheme, "scheme")?;
        let key = str_arg(layer_key, "layer_key")?;
        let out_len = out_arg(out_len, "out_len")?;
        let edges = scheme.inner.edges(key)?.as_slice();
        *out_len = edges.len();
        if cap < edges.len() {
            return Err(Failure(
                EmStatus::BufferTooSmall,
                format!("need {} slots, got {cap}", edges.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, edges.len()).copy_from_slice(edges);
        Ok(())
    })
}

/// `-sum p log2 p` over a probability vector.
#[no_mangle]
pub unsafe extern "C" fn em_shannon_entropy(probabilities: *const f64, len: usize, out: *mut f64) -> EmStatus {
    guard(|| {
        let p = slice_arg(probabilities, len, "probabilities")?;
        *out_arg(out, "out")? = entropy_bits(p);
        Ok(())
    })
}

/// Batch-level entropy of a raw activation tensor.
#[no_mangle]
pub unsafe extern "C" fn em_batch_entropy(
    scheme: *const EmBinningScheme,
    layer_key: *const c_char,
    shape: *const usize,
    ndim: usize,
    values: *const f32,
    len: usize,
    out: *mut EmEntropyEstimate,
) -> EmStatus {
    guard(|| {
        let scheme = handle(scheme, "scheme")?;
        let key = str_arg(layer_key, "layer_key")?;
        let shape = slice_arg(shape, ndim, "shape")?;
        let values = slice_arg(values, len, "values")?;
        let out = out_arg(out, "out")?;
        let batch = ActivationBatch::new(key, shape.to_vec(), values.to_vec())?;
        *out = estimate_out(&batch_entropy(&batch, &scheme.inner)?);
        Ok(())
    })
}

fn estimate_out(e: &EntropyEstimate) -> EmEntropyEstimate {
    EmEntropyEstimate {
        entropy_bits: e.entropy_bits,
        sample_count: e.sample_count,
        empty: e.empty,
    }
}

/// Entropy of a batch handle.
#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_entropy(
    scheme: *const EmBinningScheme,
    batch: *const EmActivationBatch,
    out: *mut EmEntropyEstimate,
) -> EmStatus {
    guard(|| {
        let scheme = handle(scheme, "scheme")?;
        let batch = handle(batch, "batch")?;
        *out_arg(out, "out")? = estimate_out(&batch_entropy(&batch.inner, &scheme.inner)?);
        Ok(())
    })
}

fn wrap_batch(inner: ActivationBatch) -> *mut EmActivationBatch {
    let key = CString::new(inner.layer_key().replace('\0', " ")).expect("interior NULs removed");
    Box::into_raw(Box::new(EmActivationBatch { inner, key }))
}

#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_new(
    layer_key: *const c_char,
    shape: *const usize,
    ndim: usize,
    values: *const f32,
    len: usize,
    out: *mut *mut EmActivationBatch,
) -> EmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let key = str_arg(layer_key, "layer_key")?;
        let shape = slice_arg(shape, ndim, "shape")?;
        let values = slice_arg(values, len, "values")?;
        *out = wrap_batch(ActivationBatch::new(key, shape.to_vec(), values.to_vec())?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_free(batch: *mut EmActivationBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Layer key; owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_layer_key(batch: *const EmActivationBatch) -> *const c_char {
    batch.as_ref().map_or(ptr::null(), |b| b.key.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_ndim(batch: *const EmActivationBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.inner.shape().len())
}

/// Pointer to `ndim` dimensions; owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_shape(batch: *const EmActivationBatch) -> *const usize {
    batch.as_ref().map_or(ptr::null(), |b| b.inner.shape().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_len(batch: *const EmActivationBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.inner.values().len())
}

/// Pointer to the row-major values; owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn em_activation_batch_values(batch: *const EmActivationBatch) -> *const f32 {
    batch.as_ref().map_or(ptr::null(), |b| b.inner.values().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn em_dump_read_file(path: *const c_char, out: *mut *mut EmActivationBatch) -> EmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = wrap_batch(read_dump_file(Path::new(path))?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn em_dump_write_file(batch: *const EmActivationBatch, path: *const c_char) -> EmStatus {
    guard(|| {
        let batch = handle(batch, "batch")?;
        let path = str_arg(path, "path")?;
        write_dump_file(&batch.inner, Path::new(path))?;
        Ok(())
    })
}

/// Parses an in-memory dump.
#[no_mangle]
pub unsafe extern "C" fn em_dump_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut EmActivationBatch,
) -> EmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let bytes = slice_arg(bytes, len, "bytes")?;
        *out = wrap_batch(decode_dump(bytes)?);
        Ok(())
    })
}

/// Encodes a batch into `buf`. `out_len` always receives the encoded size;
/// `EM_STATUS_BUFFER_TOO_SMALL` when `cap` is short.
#[no_mangle]
pub unsafe extern "C" fn em_dump_encode(
    batch: *const EmActivationBatch,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> EmStatus {
    guard(|| {
        let batch = handle(batch, "batch")?;
        let out_len = out_arg(out_len, "out_len")?;
        let bytes = encode_dump(&batch.inner)?;
        *out_len = bytes.len();
        if cap < bytes.len() {
            return Err(Failure(
                EmStatus::BufferTooSmall,
                format!("need {} bytes, got {cap}", bytes.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, bytes.len()).copy_from_slice(&bytes);
        Ok(())
    })
}

fn estimates(layer: &str, values: &[f64]) -> Vec<EntropyEstimate> {
    values
        .iter()
        .map(|&v| EntropyEstimate {
            layer_key: layer.to_string(),
            entropy_bits: v,
            sample_count: 1,
            empty: false,
        })
        .collect()
}

/// Builds a profile from training-batch entropies. `adversarial` may be
/// NULL when `n_adversarial` is 0.
#[no_mangle]
pub unsafe extern "C" fn em_profile_new(
    layer_key: *const c_char,
    clean: *const f64,
    n_clean: usize,
    adversarial: *const f64,
    n_adversarial: usize,
    batch_size: usize,
    out: *mut *mut EmProfile,
) -> EmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let key = str_arg(layer_key, "layer_key")?;
        let clean = estimates(key, slice_arg(clean, n_clean, "clean")?);
        let adv = if n_adversarial == 0 {
            None
        } else {
            Some(estimates(key, slice_arg(adversarial, n_adversarial, "adversarial")?))
        };
        let inner = profile(&clean, adv.as_deref(), key, batch_size)?;
        *out = Box::into_raw(Box::new(EmProfile { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn em_profile_free(profile: *mut EmProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

fn stats_out(s: &SampleStats) -> EmSampleStats {
    EmSampleStats {
        mean: s.mean,
        std: s.std,
        min: s.min,
        max: s.max,
    }
}

/// Summary statistics. `adversarial` may be NULL; `has_adversarial`
/// reports whether adversarial samples exist.
#[no_mangle]
pub unsafe extern "C" fn em_profile_stats(
    profile: *const EmProfile,
    clean: *mut EmSampleStats,
    adversarial: *mut EmSampleStats,
    has_adversarial: *mut bool,
) -> EmStatus {
    guard(|| {
        let p = &handle(profile, "profile")?.inner;
        *out_arg(clean, "clean")? = stats_out(&p.clean);
        if let Some(flag) = has_adversarial.as_mut() {
            *flag = p.adversarial.is_some();
        }
        if let (Some(dst), Some(src)) = (adversarial.as_mut(), p.adversarial.as_ref()) {
            *dst = stats_out(src);
        }
        Ok(())
    })
}

fn threshold_out(t: &DetectionThreshold) -> EmThreshold {
    EmThreshold {
        tau: t.tau,
        direction: match t.direction {
            Direction::AdversarialBelow => EmDirection::AdversarialBelow,
            Direction::AdversarialAbove => EmDirection::AdversarialAbove,
        },
        source: match t.source {
            ThresholdSource::Midpoint => EmThresholdSource::Midpoint,
            ThresholdSource::Optimized => EmThresholdSource::Optimized,
        },
        train_fpr: t.train_fpr,
        train_fnr: t.train_fnr,
    }
}

#[no_mangle]
pub unsafe extern "C" fn em_threshold_midpoint(profile: *const EmProfile, out: *mut EmThreshold) -> EmStatus {
    guard(|| {
        let p = handle(profile, "profile")?;
        let out = out_arg(out, "out")?;
        *out = threshold_out(&midpoint_threshold(&p.inner)?);
        Ok(())
    })
}

/// Threshold minimizing `fnr_weight * FNR + fpr_weight * FPR` on the
/// profile's training samples.
#[no_mangle]
pub unsafe extern "C" fn em_threshold_optimize(
    profile: *const EmProfile,
    fpr_weight: f64,
    fnr_weight: f64,
    out: *mut EmThreshold,
) -> EmStatus {
    guard(|| {
        let p = handle(profile, "profile")?;
        let out = out_arg(out, "out")?;
        *out = threshold_out(&optimize_threshold(&p.inner, fpr_weight, fnr_weight)?);
        Ok(())
    })
}

/// Labels one batch entropy. Empty estimates yield `EM_STATUS_DATA`.
#[no_mangle]
pub unsafe extern "C" fn em_classify(
    estimate: *const EmEntropyEstimate,
    threshold: *const EmThreshold,
    out: *mut EmLabel,
) -> EmStatus {
    guard(|| {
        let e = handle(estimate, "estimate")?;
        let t = handle(threshold, "threshold")?;
        let out = out_arg(out, "out")?;
        if e.empty {
            return Err(Failure(EmStatus::Data, "degenerate batch: no positive activations".into()));
        }
        let direction = match t.direction {
            EmDirection::AdversarialBelow => Direction::AdversarialBelow,
            EmDirection::AdversarialAbove => Direction::AdversarialAbove,
        };
        *out = if direction.is_adversarial(e.entropy_bits, t.tau) {
            EmLabel::Adversarial
        } else {
            EmLabel::Clean
        };
        Ok(())
    })
}

/// Weighted direction-signed z-score over `n` layers.
#[no_mangle]
pub unsafe extern "C" fn em_fuse_scores(
    profiles: *const *const EmProfile,
    entropies: *const f64,
    weights: *const f64,
    n: usize,
    out: *mut f64,
) -> EmStatus {
    guard(|| {
        let handles = slice_arg(profiles, n, "profiles")?;
        let entropies = slice_arg(entropies, n, "entropies")?;
        let weights = slice_arg(weights, n, "weights")?;
        let out = out_arg(out, "out")?;
        let mut profs = Vec::with_capacity(n);
        for &h in handles {
            profs.push(handle(h, "profile entry")?.inner.clone());
        }
        let ests: Vec<EntropyEstimate> = profs
            .iter()
            .zip(entropies)
            .map(|(p, &v)| EntropyEstimate {
                layer_key: p.layer_key.clone(),
                entropy_bits: v,
                sample_count: 1,
                empty: false,
            })
            .collect();
        *out = fuse_scores(&ests, &profs, weights)?;
        Ok(())
    })
}

fn label_in(l: EmLabel) -> Label {
    match l {
        EmLabel::Clean => Label::Clean,
        EmLabel::Adversarial => Label::Adversarial,
    }
}

/// Confusion metrics with adversarial as the positive class.
#[no_mangle]
pub unsafe extern "C" fn em_evaluate(
    predicted: *const EmLabel,
    truth: *const EmLabel,
    n: usize,
    out: *mut EmMetrics,
) -> EmStatus {
    guard(|| {
        let predicted: Vec<Label> = slice_arg(predicted, n, "predicted")?.iter().map(|&l| label_in(l)).collect();
        let truth: Vec<Label> = slice_arg(truth, n, "truth")?.iter().map(|&l| label_in(l)).collect();
        let out = out_arg(out, "out")?;
        let m = evaluate_labels(&predicted, &truth)?;
        *out = EmMetrics {
            tp: m.tp,
            tn: m.tn,
            fp: m.fp,
            fn_: m.fn_,
            accuracy: m.accuracy,
            fpr: m.fpr,
            fnr: m.fnr,
            tpr: m.tpr,
            tnr: m.tnr,
            no_negatives: m.no_negatives,
            no_positives: m.no_positives,
        };
        Ok(())
    })
}
