// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats.
//!
//! Binary files share one layout: a 4-byte magic, a little-endian `u32`
//! format version, a little-endian `u32` header length, a JSON header of
//! that length, then a raw little-endian payload. Everything else
//! (assignments, score tables, plans, reports) is versioned JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActivationSample, Dataset};
use crate::losses::LossWeights;
use crate::numerics::Matrix;
use crate::sae::{SaeParams, SaeShape};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAEM";
pub const DATASET_MAGIC: [u8; 4] = *b"SAEA";
pub const FORMAT_VERSION: u32 = 1;
pub const UNLABELED: u16 = 0xFFFF;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated {context}: expected {expected} bytes, got {actual}")]
    Truncated {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{extra} trailing bytes after {context}")]
    TrailingBytes { context: &'static str, extra: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("inconsistent file contents: {0}")]
    Inconsistent(String),

    #[error("unexpected artifact: expected format {expected:?}, found {found:?}")]
    WrongFormat { expected: String, found: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> StoreResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| StoreError::Header(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn frame(magic: [u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

/// Splits a framed file into (header, payload) after checking magic,
/// version and header bounds.
fn unframe<'a>(bytes: &'a [u8], magic: [u8; 4]) -> StoreResult<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || bytes[..4] != magic {
        let found = &bytes[..bytes.len().min(4)];
        return Err(StoreError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(StoreError::Truncated {
            context: "preamble",
            expected: 12,
            actual: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < header_len {
        return Err(StoreError::Truncated {
            context: "header",
            expected: header_len,
            actual: rest.len(),
        });
    }
    Ok(rest.split_at(header_len))
}

fn parse_header<T: DeserializeOwned>(header: &[u8]) -> StoreResult<T> {
    serde_json::from_slice(header).map_err(|e| StoreError::Header(e.to_string()))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn check_payload(context: &'static str, expected: usize, actual: usize) -> StoreResult<()> {
    if actual < expected {
        return Err(StoreError::Truncated {
            context,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(StoreError::TrailingBytes {
            context,
            extra: actual - expected,
        });
    }
    Ok(())
}

/// Header block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub k_aux: usize,
    /// Training phase that produced the parameters, e.g. `init`,
    /// `unsupervised`, `supervised`.
    pub phase: String,
    pub seed: u64,
    pub weights: Option<LossWeights>,
    pub epochs: usize,
}

impl CheckpointMeta {
    pub fn for_params(p: &SaeParams, phase: &str, seed: u64, weights: Option<LossWeights>, epochs: usize) -> Self {
        Self {
            d: p.d(),
            n: p.n(),
            k: p.k,
            k_aux: p.k_aux,
            phase: phase.to_owned(),
            seed,
            weights,
            epochs,
        }
    }

    pub fn shape(&self) -> SaeShape {
        SaeShape {
            d: self.d,
            n: self.n,
            k: self.k,
            k_aux: self.k_aux,
        }
    }
}

pub fn encode_checkpoint(p: &SaeParams, meta: &CheckpointMeta) -> StoreResult<Vec<u8>> {
    if meta.shape() != p.shape() {
        return Err(StoreError::Inconsistent(format!(
            "header shape {:?} does not match parameters {:?}",
            meta.shape(),
            p.shape()
        )));
    }
    let header = serde_json::to_vec(meta).map_err(|e| StoreError::Header(e.to_string()))?;
    let (d, n) = (p.d(), p.n());
    let mut out = frame(CHECKPOINT_MAGIC, &header, 4 * (2 * n * d + n + d));
    push_f32s(&mut out, p.w_enc.as_slice());
    push_f32s(&mut out, &p.b_enc);
    push_f32s(&mut out, p.w_dec.as_slice());
    push_f32s(&mut out, &p.b_pre);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> StoreResult<(SaeParams, CheckpointMeta)> {
    let (header, payload) = unframe(bytes, CHECKPOINT_MAGIC)?;
    let meta: CheckpointMeta = parse_header(header)?;
    meta.shape()
        .validate()
        .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
    let (d, n) = (meta.d, meta.n);
    check_payload("checkpoint payload", 4 * (2 * n * d + n + d), payload.len())?;
    let values = read_f32s(payload);
    let (w_enc, rest) = values.split_at(n * d);
    let (b_enc, rest) = rest.split_at(n);
    let (w_dec, b_pre) = rest.split_at(d * n);
    let bad = |e: crate::error::Error| StoreError::Inconsistent(e.to_string());
    let params = SaeParams::from_parts(
        Matrix::from_vec(n, d, w_enc.to_vec()).map_err(bad)?,
        b_enc.to_vec(),
        Matrix::from_vec(d, n, w_dec.to_vec()).map_err(bad)?,
        b_pre.to_vec(),
        meta.k,
        meta.k_aux,
    )
    .map_err(bad)?;
    if !params.is_finite() {
        return Err(StoreError::Inconsistent("non-finite parameter".into()));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, p: &SaeParams, meta: &CheckpointMeta) -> StoreResult<()> {
    write_atomic(path, &encode_checkpoint(p, meta)?)
}

pub fn load_checkpoint(path: &Path) -> StoreResult<(SaeParams, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    d: usize,
    timesteps: u16,
    objects: Vec<String>,
    styles: Vec<String>,
    count: usize,
}

fn label_bytes(label: Option<u16>) -> StoreResult<[u8; 2]> {
    match label {
        Some(UNLABELED) => Err(StoreError::Inconsistent(
            "label id 0xFFFF is reserved for unlabeled samples".into(),
        )),
        Some(l) => Ok(l.to_le_bytes()),
        None => Ok(UNLABELED.to_le_bytes()),
    }
}

pub fn encode_dataset(data: &Dataset) -> StoreResult<Vec<u8>> {
    data.validate()
        .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
    let header = DatasetHeader {
        d: data.d,
        timesteps: data.timesteps,
        objects: data.objects.clone(),
        styles: data.styles.clone(),
        count: data.len(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| StoreError::Header(e.to_string()))?;
    let record = 6 + 4 * data.d;
    let mut out = frame(DATASET_MAGIC, &header, record * data.len());
    for s in &data.samples {
        out.extend_from_slice(&s.timestep.to_le_bytes());
        out.extend_from_slice(&label_bytes(s.object)?);
        out.extend_from_slice(&label_bytes(s.style)?);
        push_f32s(&mut out, &s.x);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> StoreResult<Dataset> {
    let (header, payload) = unframe(bytes, DATASET_MAGIC)?;
    let h: DatasetHeader = parse_header(header)?;
    let record = 6 + 4 * h.d;
    check_payload("dataset records", record * h.count, payload.len())?;
    let u16_at = |r: &[u8], o: usize| u16::from_le_bytes([r[o], r[o + 1]]);
    let label = |v: u16| (v != UNLABELED).then_some(v);
    let samples = payload
        .chunks_exact(record)
        .map(|r| ActivationSample {
            timestep: u16_at(r, 0),
            object: label(u16_at(r, 2)),
            style: label(u16_at(r, 4)),
            x: read_f32s(&r[6..]),
        })
        .collect();
    let data = Dataset {
        d: h.d,
        timesteps: h.timesteps,
        objects: h.objects,
        styles: h.styles,
        samples,
    };
    data.validate()
        .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
    Ok(data)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> StoreResult<()> {
    write_atomic(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> StoreResult<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    data: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    data: T,
}

fn format_name(kind: &str) -> String {
    format!("saemnesia.{kind}")
}

/// Pretty JSON wrapped with a `format` tag and `version`.
pub fn encode_json<T: Serialize>(kind: &str, value: &T) -> StoreResult<Vec<u8>> {
    let format = format_name(kind);
    let mut out = serde_json::to_vec_pretty(&EnvelopeRef {
        format: &format,
        version: FORMAT_VERSION,
        data: value,
    })
    .map_err(|e| StoreError::Header(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_json<T: DeserializeOwned>(kind: &str, bytes: &[u8]) -> StoreResult<T> {
    let env: Envelope<serde_json::Value> =
        serde_json::from_slice(bytes).map_err(|e| StoreError::Header(e.to_string()))?;
    let expected = format_name(kind);
    if env.format != expected {
        return Err(StoreError::WrongFormat {
            expected,
            found: env.format,
        });
    }
    if env.version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion {
            found: env.version,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(env.data).map_err(|e| StoreError::Header(e.to_string()))
}

pub fn save_json<T: Serialize>(path: &Path, kind: &str, value: &T) -> StoreResult<()> {
    write_atomic(path, &encode_json(kind, value)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> StoreResult<T> {
    decode_json(kind, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::sae::init_params;

    fn model() -> (SaeParams, CheckpointMeta) {
        let shape = SaeShape {
            d: 5,
            n: 7,
            k: 2,
            k_aux: 3,
        };
        let p = init_params(shape, &[0.5; 5], &mut RngState::new(3)).unwrap();
        let meta = CheckpointMeta::for_params(&p, "init", 3, Some(LossWeights::default()), 0);
        (p, meta)
    }

    fn dataset() -> Dataset {
        Dataset {
            d: 2,
            timesteps: 3,
            objects: vec!["Cats".into()],
            styles: vec!["Ink".into(), "Oil".into()],
            samples: vec![
                ActivationSample {
                    x: vec![1.5, -0.25],
                    timestep: 2,
                    object: Some(0),
                    style: None,
                },
                ActivationSample {
                    x: vec![f32::MIN_POSITIVE, 3.0e7],
                    timestep: 0,
                    object: None,
                    style: Some(1),
                },
            ],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let (p, meta) = model();
        let bytes = encode_checkpoint(&p, &meta).unwrap();
        let payload = 4 * (7 * 5 + 7 + 5 * 7 + 5);
        assert_eq!(&bytes[..4], b"SAEM");
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + header_len + payload);
        let (q, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!((&q, &meta2), (&p, &meta));
        assert_eq!(encode_checkpoint(&q, &meta2).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_corruption_is_classified() {
        let (p, meta) = model();
        let bytes = encode_checkpoint(&p, &meta).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode_checkpoint(&bad), Err(StoreError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(StoreError::UnsupportedVersion { found: 9, .. })
        ));

        let cut = &bytes[..bytes.len() - 10];
        match decode_checkpoint(cut) {
            Err(StoreError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected - actual, 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_checkpoint(&long),
            Err(StoreError::TrailingBytes { extra: 1, .. })
        ));
        assert!(matches!(decode_checkpoint(&bytes[..6]), Err(StoreError::Truncated { .. })));
    }

    #[test]
    fn dataset_round_trip_and_sentinel() {
        let data = dataset();
        let bytes = encode_dataset(&data).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, data);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[3] = b'M';
        assert!(matches!(decode_dataset(&bad), Err(StoreError::BadMagic { .. })));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(StoreError::Truncated { .. })
        ));
        // checkpoints are not datasets
        let (p, meta) = model();
        assert!(matches!(
            decode_dataset(&encode_checkpoint(&p, &meta).unwrap()),
            Err(StoreError::BadMagic { .. })
        ));
    }

    #[test]
    fn json_envelope() {
        let v = vec![1.0f64, 0.1, 1e-300];
        let bytes = encode_json("values", &v).unwrap();
        let back: Vec<f64> = decode_json("values", &bytes).unwrap();
        assert_eq!(back, v);
        assert!(matches!(
            decode_json::<Vec<f64>>("other", &bytes),
            Err(StoreError::WrongFormat { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
