//! Versioned binary checkpoint container.
//!
//! All integers little-endian:
//!
//! | field        | bytes            | content                                   |
//! |--------------|------------------|-------------------------------------------|
//! | magic        | 8                | `HNEGCKPT`                                |
//! | version      | 4 (u32)          | currently 1                               |
//! | dtype        | 1 (u8)           | 1 = f32, 2 = f64                          |
//! | config_len   | 4 (u32)          | byte length of the config JSON            |
//! | config       | config_len       | UTF-8 JSON of the encoder config          |
//! | tensor_count | 4 (u32)          | number of named tensors                   |
//! | tensor       | repeated         | name_len u16, name, ndim u8, dims u32×ndim, values |
//! | digest       | 32               | SHA-256 of every preceding byte           |

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Encoder, EncoderConfig, EncoderError, ParamSet};
use crate::numkit::Tensor;
use crate::scalar::{Dtype, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HNEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: bad {field} ({detail})")]
    Format { field: &'static str, detail: String },
    #[error(transparent)]
    Model(#[from] EncoderError),
}

fn format_err(field: &'static str, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        field,
        detail: detail.into(),
    }
}

pub fn write_checkpoint<T: Scalar>(model: &Encoder<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(field, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

fn read_value(dtype: Dtype, bytes: &[u8]) -> f64 {
    match dtype {
        Dtype::F32 => f32::read_le(bytes) as f64,
        Dtype::F64 => f64::read_le(bytes),
    }
}

/// Parses a checkpoint, converting stored values to `T` when the dtypes differ.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Encoder<T>, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err("magic", "not a checkpoint file"));
    }
    if bytes.len() < 8 + 4 + 1 + 32 {
        return Err(format_err("digest", "file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err("version", format!("unsupported version {version}")));
    }
    let tag = r.take(1, "dtype")?[0];
    let dtype = Dtype::from_tag(tag).ok_or_else(|| format_err("dtype", format!("unknown tag {tag}")))?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("digest", "content does not match stored SHA-256"));
    }
    let config_len = r.u32("config_len")? as usize;
    let config: EncoderConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| format_err("config", e.to_string()))?;
    let count = r.u32("tensor_count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "tensor_name")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor_name")?)
            .map_err(|e| format_err("tensor_name", e.to_string()))?
            .to_string();
        let ndim = r.take(1, "tensor_shape")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor_shape")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.width(), "tensor_data")?;
        let data = raw
            .chunks(dtype.width())
            .map(|c| {
                T::from_f64(read_value(dtype, c)).ok_or_else(|| format_err("tensor_data", "unrepresentable value"))
            })
            .collect::<Result<Vec<T>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| format_err("tensor_shape", format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(format_err("tensor_count", "trailing bytes after last tensor"));
    }
    Ok(Encoder::from_parts(config, ParamSet::new(entries))?)
}

pub fn save_checkpoint<T: Scalar>(model: &Encoder<T>, path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let bytes = write_checkpoint(model);
    std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Encoder<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Encoder<f64> {
        Encoder::init(EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 4,
            ff_dim: 8,
            vocab_size: 258,
            max_seq_len: 6,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: Encoder<f64> = read_checkpoint(&write_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_round_trip_through_f64_reader() {
        let m = model().params().cast::<f32>();
        let m32 = Encoder::from_parts(model().config().clone(), m).unwrap();
        let bytes = write_checkpoint(&m32);
        assert_eq!(bytes[12], Dtype::F32.tag());
        let back: Encoder<f32> = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m32);
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = write_checkpoint(&model());
        let field = |b: &[u8]| match read_checkpoint::<f64>(b) {
            Err(CheckpointError::Format { field, .. }) => field,
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(field(&bad), "version");
        let mut bad = bytes.clone();
        bad[12] = 7;
        assert_eq!(field(&bad), "dtype");
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 40] ^= 1;
        assert_eq!(field(&bad), "digest");
        assert_eq!(field(&bytes[..20]), "digest");
    }
}
