//! Binary checkpoint format.
//!
//! ```text
//! "RNTCKPT1"  u32 tensor_count
//! per tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[..]
//! u32 config_hash
//! ```
//! All integers and floats are little-endian. The model config is recovered
//! from tensor shapes and validated against the trailing hash.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, NetworkError, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RNTCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("trailing bytes after checkpoint")]
    Trailing,
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("config hash mismatch: file {file:#010x}, shapes imply {shapes:#010x}")]
    Hash { file: u32, shapes: u32 },
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let tensors: Vec<(&str, &Tensor)> = model.params.iter().collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&model.config.hash().to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.insert(name, Tensor { shape, data });
    }
    let file_hash = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing);
    }
    let config = infer_config(&tensors)?;
    if config.hash() != file_hash {
        return Err(CheckpointError::Hash {
            file: file_hash,
            shapes: config.hash(),
        });
    }
    Ok(Model::from_params(config, ParamSet::from_tensors(tensors))?)
}

fn shape_of<'a>(t: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a [usize], CheckpointError> {
    match t.get(name) {
        Some(t) if t.shape.len() == 2 => Ok(&t.shape),
        Some(_) => Err(CheckpointError::Layout(format!("{name} must be 2-D"))),
        None => Err(CheckpointError::Layout(format!("missing {name}"))),
    }
}

fn infer_config(t: &BTreeMap<String, Tensor>) -> Result<ModelConfig, CheckpointError> {
    let embed = shape_of(t, "pred.embed")?;
    let out_w = shape_of(t, "joint.out_w")?;
    let w_ih0 = shape_of(t, "enc.0.fwd.w_ih")?;
    let w_hh0 = shape_of(t, "enc.0.fwd.w_hh")?;
    let enc_layers = (0..)
        .take_while(|l| t.contains_key(&format!("enc.{l}.fwd.w_ih")))
        .count();
    Ok(ModelConfig {
        input_dim: w_ih0[0],
        enc_layers,
        enc_cells: w_hh0[0],
        bidirectional_encoder: t.contains_key("enc.0.bwd.w_ih"),
        pred_cells: embed[1],
        joint_dim: out_w[1],
        vocab_size: embed[0],
    })
}

pub fn save(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    decode(&std::fs::read(path)?)
}

/// Rounds every parameter to `f32`, matching what a save/load cycle yields.
pub fn quantize(model: &Model) -> Model {
    let mut m = model.clone();
    for (_, t) in m.params.iter_mut() {
        for v in &mut t.data {
            *v = f64::from(*v as f32);
        }
    }
    m
}
