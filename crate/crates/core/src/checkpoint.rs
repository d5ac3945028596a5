//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "HTENCCKP"
//! version      u32       currently 1
//! header_len   u64
//! header       JSON      {"config": ModelConfig, "vocab": [...], "act_labels": [...]|null, "step": u64}
//! count        u64       number of parameters
//! per parameter, in name order:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u64 each)
//!   values     f64 × prod(dims)
//! ```
//!
//! Optimizer moments are not stored.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::models::{ActVocab, Model, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HTENCCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub act_labels: Option<ActVocab>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

pub fn to_bytes(model: &Model, vocab: &Vocab, act_labels: Option<&ActVocab>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab: vocab.clone(),
        act_labels: act_labels.cloned(),
        step: model.params.step(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 8 * model.params.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab, act_labels: Option<&ActVocab>) -> Result<()> {
    fs::write(path, to_bytes(model, vocab, act_labels)?)?;
    Ok(())
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(buf)
}

fn take_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn take_u64(r: &mut Cursor<&[u8]>) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take(r)?)).map_err(|_| Error::Checkpoint("length overflow".into()))
}

fn take_vec(r: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Checkpoint(format!("record of {len} bytes exceeds the {remaining} left")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Parses a checkpoint and checks that it holds exactly the parameters
/// its config implies.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    if &take::<8>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = take_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = take_u64(&mut r)?;
    let header: CheckpointHeader = serde_json::from_slice(&take_vec(&mut r, hlen)?)?;
    let count = take_u64(&mut r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let nlen = take_u32(&mut r)? as usize;
        let name = String::from_utf8(take_vec(&mut r, nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = take_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(&mut r)?);
        }
        let n: usize = shape.iter().product();
        let raw = take_vec(&mut r, n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.position() as usize != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let reference = crate::models::build_model(header.config.clone(), 0, false)?;
    for (name, p) in reference.params.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}", got.value.shape())));
        }
    }
    if store.len() != reference.params.len() {
        return Err(Error::Checkpoint("unexpected extra parameters".into()));
    }
    Ok(Checkpoint {
        model: Model {
            config: header.config.clone(),
            params: store,
        },
        header,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
