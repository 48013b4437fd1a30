//! Little-endian binary tensor files.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  "ALTCKPT\0"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! n_tensors    u32
//! per tensor:  name_len u32, name bytes, ndim u32, ndim x u64 dims,
//!              prod(dims) x f64
//! ```
//!
//! For model checkpoints the header is `{"config": ModelConfig, "step": u64}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{AltError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ALTCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub l2_norm: f64,
    pub max_abs: f64,
}

pub fn write_tensor_file(path: &Path, header: &serde_json::Value, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in data.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| AltError::io(path, e))?;
    f.write_all(&buf).map_err(|e| AltError::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AltError::Format("truncated tensor file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub type TensorEntry = (String, Vec<usize>, Vec<f64>);

pub fn read_tensor_file(path: &Path) -> Result<(serde_json::Value, Vec<TensorEntry>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AltError::io(path, e))?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(AltError::Format(format!("{}: not a tensor file", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AltError::Format(format!("unsupported tensor file version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| AltError::Format(format!("tensor file header: {e}")))?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| AltError::Format("tensor name is not UTF-8".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if c.pos != bytes.len() {
        return Err(AltError::Format("trailing bytes after tensors".into()));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint(path: &Path, params: &Parameters, step: u64) -> Result<()> {
    let header = serde_json::to_value(CheckpointHeader {
        config: params.config.clone(),
        step,
    })
    .expect("header serializes");
    let tensors: Vec<_> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape, t.data))
        .collect();
    write_tensor_file(path, &header, &tensors)
}

/// Copy named tensors into `target`, requiring an exact name/shape match.
pub(crate) fn fill_tensors(target: &mut Parameters, tensors: Vec<TensorEntry>) -> Result<()> {
    let mut slots = target.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(AltError::Format(format!(
            "expected {} tensors, found {}",
            slots.len(),
            tensors.len()
        )));
    }
    for (slot, (name, shape, data)) in slots.iter_mut().zip(tensors) {
        if slot.name != name || slot.shape != shape {
            return Err(AltError::Format(format!(
                "tensor mismatch: expected {} {:?}, found {name} {shape:?}",
                slot.name, slot.shape
            )));
        }
        *slot.data = data;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, tensors) = read_tensor_file(path)?;
    let header: CheckpointHeader = serde_json::from_value(header)
        .map_err(|e| AltError::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let mut params = Parameters::zeros(&header.config);
    fill_tensors(&mut params, tensors)?;
    if !params.all_finite() {
        return Err(AltError::Format("checkpoint contains non-finite values".into()));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
    })
}

pub fn inspect_checkpoint(path: &Path) -> Result<(ModelConfig, u64, Vec<TensorSummary>)> {
    let ck = load_checkpoint(path)?;
    let summaries = ck
        .params
        .tensors()
        .into_iter()
        .map(|t| TensorSummary {
            l2_norm: t.data.iter().map(|x| x * x).sum::<f64>().sqrt(),
            max_abs: t.data.iter().fold(0.0, |m, x| m.max(x.abs())),
            name: t.name,
            shape: t.shape,
        })
        .collect();
    Ok((ck.params.config, ck.step, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            dropout: 0.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let p = init_params(&config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, 42).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.params, p);
        let bytes = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &ck.params, 42).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = init_params(&config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(AltError::Format(_))));
    }

    #[test]
    fn inspect_lists_every_tensor() {
        let p = init_params(&config(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, 3).unwrap();
        let (_, step, s) = inspect_checkpoint(&path).unwrap();
        assert_eq!(step, 3);
        assert_eq!(s.len(), 4 + 12 * 2 + 2);
        assert_eq!(s[0].shape, vec![7, 4]);
    }
}
