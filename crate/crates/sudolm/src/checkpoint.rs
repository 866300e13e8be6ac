//! Bit-exact persistence of model and optimizer state.
//!
//! File layout: a single-line UTF-8 JSON manifest, a newline, then the raw
//! payload of concatenated little-endian f32 tensor data. The manifest maps
//! tensor names to `(shape, byte offset, byte length)` with consecutive,
//! non-overlapping offsets in manifest order. Optimizer moments are stored
//! under `adam.m.*` / `adam.v.*` names. The manifest also pins the model
//! config and the 64-bit FNV-1a hash of the vocabulary file so a checkpoint
//! can never be evaluated against the wrong tokenizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocab_hash: u64,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub vocab_hash: u64,
}

/// Writes params (and optionally optimizer state) so that a later `load`
/// reproduces them bit-exactly.
pub fn save(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&AdamState>,
    vocab_hash: u64,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut append = |name: String, t: &Tensor, payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: (t.numel() * 4) as u64,
        });
    };
    for (name, t) in params.named() {
        append(name, t, &mut payload);
    }
    if let Some(state) = optimizer {
        for (name, t) in &state.m {
            append(format!("adam.m.{name}"), t, &mut payload);
        }
        for (name, t) in &state.v {
            append(format!("adam.v.{name}"), t, &mut payload);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config,
        vocab_hash,
        adam_step: optimizer.map(|s| s.step),
        tensors: entries,
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing unknown format versions, inconsistent
/// tensor tables, and truncated payloads.
pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptCheckpoint("no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = &bytes[newline + 1..];

    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.offset != expected_offset {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {:?} at offset {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if (numel * 4) as u64 != e.len {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {:?}: shape {:?} disagrees with byte length {}",
                e.name, e.shape, e.len
            )));
        }
        expected_offset += e.len;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes, manifest expects {expected_offset}",
            payload.len()
        )));
    }

    let mut param_tensors = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for e in &manifest.tensors {
        let raw = &payload[e.offset as usize..(e.offset + e.len) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(&e.shape, data)?;
        if let Some(rest) = e.name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = e.name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), tensor);
        } else {
            param_tensors.insert(e.name.clone(), tensor);
        }
    }
    let params = ModelParams::from_named(manifest.config, param_tensors)?;
    let optimizer = manifest.adam_step.map(|step| AdamState {
        step,
        m: adam_m,
        v: adam_v,
    });
    Ok(Checkpoint {
        params,
        optimizer,
        vocab_hash: manifest.vocab_hash,
    })
}

/// Hard error when a checkpoint was written against a different vocabulary
/// file. Prevents silently mis-tokenized evaluation.
pub fn verify_vocab_hash(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    let actual = vocab.file_hash();
    if ckpt.vocab_hash != actual {
        return Err(Error::VocabHash {
            expected: ckpt.vocab_hash,
            actual,
        });
    }
    Ok(())
}
