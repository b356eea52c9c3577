//! Activation dump files and run manifests.
//!
//! # Dump layout (all integers little-endian)
//!
//! | offset      | size      | field                                  |
//! |-------------|-----------|----------------------------------------|
//! | 0           | 4         | magic `ADMP`                           |
//! | 4           | 2         | version (u16, currently 1)             |
//! | 6           | 2         | layer key length `L` (u16)             |
//! | 8           | L         | layer key, UTF-8                       |
//! | 8+L         | 1         | dtype code (u8, 1 = f32)               |
//! | 9+L         | 1         | ndim `D` (u8, >= 1)                    |
//! | 10+L        | 8*D       | dims (u64 each)                        |
//! | 10+L+8D     | 4         | CRC-32 of all preceding header bytes   |
//! | 14+L+8D     | 4*prod    | payload, f32 row-major                 |
//!
//! The file must end exactly after the payload.
//!
//! # Manifest
//!
//! A TOML file listing batches, their ground-truth label and one dump file
//! per layer. Relative paths resolve against the manifest's directory.
//!
//! ```toml
//! batch_size = 16
//!
//! [metadata]
//! source = "demo"
//!
//! [[batches]]
//! batch_id = 0
//! label = "clean"          # clean | adversarial | unknown
//! [batches.files]
//! "features.0" = "dumps/clean_000_features.0.admp"
//! "classifier.3" = "dumps/clean_000_classifier.3.admp"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::Label;
use crate::entropy::ActivationBatch;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ADMP";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// Size in bytes of a header with the given key length and rank.
pub fn header_len(key_len: usize, ndim: usize) -> usize {
    4 + 2 + 2 + key_len + 1 + 1 + 8 * ndim + 4
}

fn encode_header(batch: &ActivationBatch) -> Result<Vec<u8>> {
    let key = batch.layer_key().as_bytes();
    let key_len = u16::try_from(key.len())
        .map_err(|_| Error::data(format!("layer key of {} bytes is too long", key.len())))?;
    let ndim = u8::try_from(batch.shape().len())
        .map_err(|_| Error::data(format!("{} dimensions exceed the format limit", batch.shape().len())))?;
    let mut out = Vec::with_capacity(header_len(key.len(), ndim as usize));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&key_len.to_le_bytes());
    out.extend_from_slice(key);
    out.push(DTYPE_F32);
    out.push(ndim);
    for &d in batch.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serializes `batch` into its dump bytes.
pub fn encode_dump(batch: &ActivationBatch) -> Result<Vec<u8>> {
    let mut out = encode_header(batch)?;
    out.reserve(batch.values().len() * 4);
    for v in batch.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_dump<W: Write>(batch: &ActivationBatch, mut sink: W) -> Result<()> {
    let bytes = encode_dump(batch)?;
    sink.write_all(&bytes)
        .and_then(|_| sink.flush())
        .map_err(|e| Error::io("<dump sink>", e))
}

pub fn read_dump<R: Read>(mut source: R) -> Result<ActivationBatch> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<dump source>", e))?;
    decode_dump(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(format!(
                    "truncated dump: need {n} bytes for {what} at offset {}, {} available",
                    self.pos,
                    self.bytes.len().saturating_sub(self.pos)
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates a complete dump.
pub fn decode_dump(bytes: &[u8]) -> Result<ActivationBatch> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:02x?}, expected ADMP")));
    }
    let version = cur.u16("version")?;
    let key_len = cur.u16("key length")? as usize;
    let key = cur.take(key_len, "layer key")?;
    let dtype = cur.u8("dtype")?;
    let ndim = cur.u8("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.u64("dimension")?);
    }
    let header_end = cur.pos;
    let stored_crc = cur.u32("header checksum")?;
    let crc = crc32fast::hash(&bytes[..header_end]);
    if crc != stored_crc {
        return Err(Error::format(format!(
            "header checksum mismatch: stored {stored_crc:08x}, computed {crc:08x}"
        )));
    }
    if version != VERSION {
        return Err(Error::Compatibility(format!("unsupported dump version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Compatibility(format!("unsupported dtype code {dtype}")));
    }
    let key = std::str::from_utf8(key)
        .map_err(|e| Error::format(format!("layer key is not UTF-8: {e}")))?;
    if ndim == 0 {
        return Err(Error::format("dump declares zero dimensions"));
    }
    if dims.contains(&0) {
        return Err(Error::format(format!("dump declares a zero dimension {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|c| usize::try_from(c).ok())
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(format!("dims {dims:?} overflow")))?;
    let remaining = bytes.len() - cur.pos;
    if remaining < count * 4 {
        return Err(Error::format(format!(
            "truncated payload: header declares {count} values ({} bytes), {remaining} bytes present",
            count * 4
        )));
    }
    if remaining > count * 4 {
        return Err(Error::format(format!(
            "{} trailing bytes after payload",
            remaining - count * 4
        )));
    }
    let values: Vec<f32> = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let shape = dims.into_iter().map(|d| d as usize).collect();
    ActivationBatch::new(key, shape, values)
}

pub fn write_dump_file(batch: &ActivationBatch, path: &Path) -> Result<()> {
    let bytes = encode_dump(batch)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a dump file; decode errors carry the file path.
pub fn read_dump_file(path: &Path) -> Result<ActivationBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes).map_err(|e| {
        let at = |m: String| format!("{}: {m}", path.display());
        match e {
            Error::Format(m) => Error::Format(at(m)),
            Error::Data(m) => Error::Data(at(m)),
            Error::Compatibility(m) => Error::Compatibility(at(m)),
            other => other,
        }
    })
}

/// Ground truth attached to a manifest batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchLabel {
    Clean,
    Adversarial,
    Unknown,
}

impl BatchLabel {
    pub fn known(self) -> Option<Label> {
        match self {
            BatchLabel::Clean => Some(Label::Clean),
            BatchLabel::Adversarial => Some(Label::Adversarial),
            BatchLabel::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBatch {
    pub batch_id: u64,
    pub label: BatchLabel,
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub batch_size: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub batches: Vec<ManifestBatch>,
    /// Directory that relative file paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: RunManifest =
            toml::from_str(text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate_structure()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    fn validate_structure(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("manifest batch_size must be positive"));
        }
        let mut seen = BTreeSet::new();
        for b in &self.batches {
            if !seen.insert(b.batch_id) {
                return Err(Error::config(format!("duplicate batch_id {}", b.batch_id)));
            }
            if b.files.is_empty() {
                return Err(Error::config(format!("batch {} lists no files", b.batch_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.base_dir.join(file)
        }
    }

    /// Layer keys referenced by every batch.
    pub fn layer_keys(&self) -> BTreeSet<String> {
        self.batches
            .iter()
            .flat_map(|b| b.files.keys().cloned())
            .collect()
    }

    /// Reads one batch's dump for `layer_key`, checking that the file's own
    /// key agrees with the manifest.
    pub fn load_batch(&self, batch: &ManifestBatch, layer_key: &str) -> Result<ActivationBatch> {
        let file = batch.files.get(layer_key).ok_or_else(|| {
            Error::config(format!("batch {} has no dump for '{layer_key}'", batch.batch_id))
        })?;
        let path = self.resolve(file);
        let act = read_dump_file(&path)?;
        if act.layer_key() != layer_key {
            return Err(Error::data(format!(
                "{} holds layer '{}', manifest says '{layer_key}'",
                path.display(),
                act.layer_key()
            )));
        }
        Ok(act)
    }

    /// Checks that every referenced dump exists and parses.
    pub fn verify_files(&self) -> Result<()> {
        for b in &self.batches {
            for key in b.files.keys() {
                self.load_batch(b, key)?;
            }
        }
        Ok(())
    }
}
