//! Bit-exact checkpoint container.
//!
//! Layout of a `.fptq` file:
//!
//! ```text
//! magic "FPTQ" | version u32 LE | manifest_len u64 LE | manifest JSON
//! | zero padding to a 64-byte boundary | payload
//! ```
//!
//! The manifest lists every tensor with dtype, shape, byte offset and length.
//! Offsets are relative to the payload start, 64-byte aligned, and laid out
//! densely in manifest order; byte lengths are fully determined by dtype and
//! shape. The reader enforces the canonical layout, so any mutation of magic,
//! offsets, lengths or shapes is rejected with a structured error.
//!
//! 4-bit tensors pack two's-complement nibbles in [-7, 7], two per byte, low
//! nibble first; each row is padded to a whole byte and an odd trailing
//! nibble must be zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::recipe::Recipe;
use crate::tensor::Tensor2D;

pub const MAGIC: [u8; 4] = *b"FPTQ";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: u64 = 64;

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "i8")]
    I8,
    #[serde(rename = "u8-packed-4bit")]
    U8Packed4,
}

impl Dtype {
    /// Exact payload length of a rows x cols tensor.
    pub fn byte_len(self, rows: u64, cols: u64) -> Option<u64> {
        let per_row = match self {
            Dtype::F32 => cols.checked_mul(4)?,
            Dtype::I8 => cols,
            Dtype::U8Packed4 => cols.div_ceil(2),
        };
        rows.checked_mul(per_row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: [u64; 2],
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    format_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipe: Option<Recipe>,
}

/// In-memory tensor payload of a container.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor2D),
    I8 { rows: usize, cols: usize, data: Vec<i8> },
    /// Row-padded packed nibbles; `data.len() == rows * ceil(cols / 2)`.
    Packed4 { rows: usize, cols: usize, data: Vec<u8> },
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I8 { .. } => Dtype::I8,
            TensorData::Packed4 { .. } => Dtype::U8Packed4,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorData::F32(t) => (t.rows(), t.cols()),
            TensorData::I8 { rows, cols, .. } | TensorData::Packed4 { rows, cols, .. } => (*rows, *cols),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::I8 { data, .. } => data.iter().map(|v| *v as u8).collect(),
            TensorData::Packed4 { data, .. } => data.clone(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let (rows, cols) = self.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("tensor {name:?} has an empty shape")));
        }
        let expected = self
            .dtype()
            .byte_len(rows as u64, cols as u64)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} shape overflows")))?;
        let actual = match self {
            TensorData::F32(t) => t.data().len() as u64 * 4,
            TensorData::I8 { data, .. } => data.len() as u64,
            TensorData::Packed4 { data, .. } => data.len() as u64,
        };
        if expected != actual {
            return Err(Error::Format(format!(
                "tensor {name:?}: payload {actual} bytes, expected {expected}"
            )));
        }
        Ok(())
    }
}

/// Pack signed nibbles in [-7, 7], two per byte, low nibble first. An odd
/// tail is padded with a zero nibble.
pub fn pack4(values: &[i8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = nibble_of(pair[0])?;
        let hi = if pair.len() == 2 { nibble_of(pair[1])? } else { 0 };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

/// Inverse of [`pack4`]: decode exactly `count` nibbles. The byte slice must
/// be exactly `ceil(count / 2)` long and a padding nibble must be zero.
pub fn unpack4(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != count.div_ceil(2) {
        return Err(Error::Format(format!(
            "{} packed bytes for {count} nibbles",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (i, b) in bytes.iter().enumerate() {
        for half in 0..2 {
            let idx = 2 * i + half;
            let raw = (b >> (4 * half)) & 0x0f;
            if idx < count {
                out.push(nibble_value(raw)?);
            } else if raw != 0 {
                return Err(Error::Format("nonzero padding nibble".into()));
            }
        }
    }
    Ok(out)
}

fn nibble_of(v: i8) -> Result<u8> {
    if !(-7..=7).contains(&v) {
        return Err(Error::InvalidArg(format!("nibble value {v} outside [-7, 7]")));
    }
    Ok((v as u8) & 0x0f)
}

fn nibble_value(raw: u8) -> Result<i8> {
    let v = ((raw as i8) << 4) >> 4;
    if v == -8 {
        return Err(Error::Format("nibble -8 outside the symmetric range".into()));
    }
    Ok(v)
}

/// Pack a rows x cols integer matrix with each row padded to whole bytes.
pub fn pack4_rows(rows: usize, cols: usize, values: &[i8]) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {rows}x{cols}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(rows * cols.div_ceil(2));
    for row in values.chunks(cols) {
        out.extend_from_slice(&pack4(row)?);
    }
    Ok(out)
}

/// Inverse of [`pack4_rows`].
pub fn unpack4_rows(rows: usize, cols: usize, bytes: &[u8]) -> Result<Vec<i8>> {
    let per_row = cols.div_ceil(2);
    if bytes.len() != rows * per_row {
        return Err(Error::Format(format!(
            "{} packed bytes for {rows}x{cols}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for row in bytes.chunks(per_row) {
        out.extend_from_slice(&unpack4(row, cols)?);
    }
    Ok(out)
}

/// Single-payload checkpoint container: config, optional embedded recipe,
/// and named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContainer {
    pub model_config: ModelConfig,
    pub recipe: Option<Recipe>,
    pub tensors: Vec<(String, TensorData)>,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl CheckpointContainer {
    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model_config.validate()?;
        if let Some(r) = &self.recipe {
            r.validate(None)?;
        }
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut cursor = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        for (name, data) in &self.tensors {
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::Format(format!("bad or duplicate tensor name {name:?}")));
            }
            data.validate(name)?;
            let (rows, cols) = data.shape();
            let len = data.dtype().byte_len(rows as u64, cols as u64).expect("validated");
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: data.dtype(),
                shape: [rows as u64, cols as u64],
                byte_offset: cursor,
                byte_length: len,
            });
            cursor = align_up(cursor + len);
        }
        let payload_len = entries
            .last()
            .map(|e| e.byte_offset + e.byte_length)
            .unwrap_or(0);
        let manifest = ManifestDoc {
            format_version: FORMAT_VERSION,
            model_config: self.model_config,
            tensors: entries,
            recipe: self.recipe.clone(),
        };
        let manifest_json =
            serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;

        let payload_start = align_up((HEADER_LEN + manifest_json.len()) as u64) as usize;
        let mut bytes = Vec::with_capacity(payload_start + payload_len as usize);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest_json);
        bytes.resize(payload_start, 0);
        for (entry, (_, data)) in manifest.tensors.iter().zip(&self.tensors) {
            bytes.resize(payload_start + entry.byte_offset as usize, 0);
            bytes.extend_from_slice(&data.payload());
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated header".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let manifest_end = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .filter(|end| *end <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("manifest extends past end of file".into()))?;
        let manifest: ManifestDoc =
            serde_json::from_slice(&bytes[HEADER_LEN..manifest_end as usize])
                .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(Error::Format(format!(
                "manifest format_version {} != header {version}",
                manifest.format_version
            )));
        }
        manifest
            .model_config
            .validate()
            .map_err(|e| Error::Format(format!("model_config: {e}")))?;

        let payload_start = align_up(manifest_end);
        if payload_start > bytes.len() as u64 {
            return Err(Error::Format("truncated before payload".into()));
        }
        let payload = &bytes[payload_start as usize..];

        let mut cursor = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if entry.name.is_empty() || !seen.insert(entry.name.clone()) {
                return Err(Error::Format(format!(
                    "bad or duplicate tensor name {:?}",
                    entry.name
                )));
            }
            let [rows, cols] = entry.shape;
            if rows == 0 || cols == 0 || rows > u32::MAX as u64 || cols > u32::MAX as u64 {
                return Err(Error::Format(format!(
                    "tensor {:?}: bad shape {rows}x{cols}",
                    entry.name
                )));
            }
            let expected_len = entry
                .dtype
                .byte_len(rows, cols)
                .ok_or_else(|| Error::Format(format!("tensor {:?}: shape overflows", entry.name)))?;
            if entry.byte_length != expected_len {
                return Err(Error::Format(format!(
                    "tensor {:?}: byte_length {} != {} implied by shape",
                    entry.name, entry.byte_length, expected_len
                )));
            }
            if entry.byte_offset != cursor {
                return Err(Error::Format(format!(
                    "tensor {:?}: offset {} breaks the canonical dense 64-byte-aligned layout (expected {cursor})",
                    entry.name, entry.byte_offset
                )));
            }
            let end = entry
                .byte_offset
                .checked_add(entry.byte_length)
                .filter(|end| *end <= payload.len() as u64)
                .ok_or_else(|| Error::Format(format!("tensor {:?}: truncated payload", entry.name)))?;
            let raw = &payload[entry.byte_offset as usize..end as usize];
            let (rows, cols) = (rows as usize, cols as usize);
            let data = match entry.dtype {
                Dtype::F32 => {
                    let values: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor2D::new(rows, cols, values).map_err(|e| {
                        Error::Format(format!("tensor {:?}: {e}", entry.name))
                    })?;
                    TensorData::F32(t)
                }
                Dtype::I8 => TensorData::I8 {
                    rows,
                    cols,
                    data: raw.iter().map(|b| *b as i8).collect(),
                },
                Dtype::U8Packed4 => {
                    // validate nibble range and padding eagerly
                    unpack4_rows(rows, cols, raw)
                        .map_err(|e| Error::Format(format!("tensor {:?}: {e}", entry.name)))?;
                    TensorData::Packed4 {
                        rows,
                        cols,
                        data: raw.to_vec(),
                    }
                }
            };
            tensors.push((entry.name.clone(), data));
            cursor = align_up(entry.byte_offset + entry.byte_length);
        }
        let expected_payload = manifest
            .tensors
            .last()
            .map(|e| e.byte_offset + e.byte_length)
            .unwrap_or(0);
        if payload.len() as u64 != expected_payload {
            return Err(Error::Format(format!(
                "payload is {} bytes, manifest implies {expected_payload}",
                payload.len()
            )));
        }
        if let Some(recipe) = &manifest.recipe {
            recipe
                .validate(Some(&manifest.model_config))
                .map_err(|e| Error::Format(format!("embedded recipe: {e}")))?;
        }
        Ok(Self {
            model_config: manifest.model_config,
            recipe: manifest.recipe,
            tensors,
        })
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
