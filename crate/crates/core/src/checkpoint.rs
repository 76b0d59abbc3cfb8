//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `A2DCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! Alignment-module tensors are flagged as training-only so that inference
//! loaders can skip them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::distill::{AamParams, AamShape, DistillConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"A2DCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob section.
    offset: usize,
    inference: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aam: Option<Vec<AamShape>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distill: Option<DistillConfig>,
}

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub aams: Option<AamParams>,
    pub distill: Option<DistillConfig>,
}

pub fn save(
    path: &Path,
    model: &Model,
    vocab: &Vocab,
    aams: Option<&AamParams>,
    distill: Option<&DistillConfig>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |set: &ParamSet, inference: bool| {
        for (name, t) in set.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                inference,
            });
            offset += t.numel();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    };
    push(model.params(), true);
    if let Some(a) = aams {
        push(a.params(), false);
    }
    let header = Header {
        config: model.config().clone(),
        vocab: vocab.tokens().to_vec(),
        tensors,
        aam: aams.map(AamParams::shapes),
        distill: distill.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let blob = &body[len..];
    let n_floats = blob.len() / 4;
    let mut model_tensors = Vec::new();
    let mut aam_tensors = Vec::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.offset + numel > n_floats {
            return Err(Error::Format(format!("tensor `{}` runs past end of file", entry.name)));
        }
        let data = blob[entry.offset * 4..(entry.offset + numel) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&entry.shape, data)?;
        if entry.inference {
            model_tensors.push((entry.name.clone(), t));
        } else {
            aam_tensors.push((entry.name.clone(), t));
        }
    }
    let model = Model::from_named(header.config, &model_tensors)?;
    let aams = match &header.aam {
        Some(shapes) => Some(AamParams::from_named(shapes, &aam_tensors)?),
        None if aam_tensors.is_empty() => None,
        None => return Err(Error::Format("alignment tensors without shapes".into())),
    };
    let vocab = Vocab::from_tokens(header.vocab.iter().map(String::as_str));
    if vocab.len() != header.vocab.len() {
        return Err(Error::Format("vocabulary has duplicate or misplaced entries".into()));
    }
    Ok(Checkpoint {
        model,
        vocab,
        aams,
        distill: header.distill,
    })
}
