//! Single-file model container: a magic tag, a JSON header describing the
//! run and the array directory, then raw little-endian f64 payloads.
//!
//! Layout: `PKSCKPT1 | u64 header length | header JSON | arrays`. Arrays
//! appear in directory order, so the header fully determines the payload.

use crate::config::RunConfig;
use crate::params::ParamStore;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"PKSCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a valid checkpoint: {reason}")]
    Format { path: String, reason: String },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    Velocity,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    arrays: Vec<ArrayEntry>,
}

/// A loaded training state.
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: ParamStore,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Writes the complete training state to one file.
pub fn save(
    path: &Path,
    config: &RunConfig,
    step: u64,
    rng: &ChaCha8Rng,
    params: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &String, kind: ArrayKind, data: &ArrayD<f64>, payload: &mut Vec<u8>| {
        arrays.push(ArrayEntry { name: name.clone(), kind, shape: data.shape().to_vec() });
        for v in data.as_slice().expect("parameters are stored contiguously") {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, data) in params.iter() {
        push(name, ArrayKind::Param, data, &mut payload);
    }
    for (name, data) in params.velocity_iter() {
        push(name, ArrayKind::Velocity, data, &mut payload);
    }

    let header = Header {
        config: config.clone(),
        step,
        rng_seed: rng.get_seed().to_vec(),
        rng_word_pos: rng.get_word_pos().to_string(),
        arrays,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| format_err(path, format!("header serialization failed: {e}")))?;

    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(MAGIC).map_err(io_err(path))?;
    f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err(path))?;
    f.write_all(&header_json).map_err(io_err(path))?;
    f.write_all(&payload).map_err(io_err(path))?;
    Ok(())
}

/// Reads a checkpoint back, restoring parameters, momentum buffers, and the
/// data-order RNG position.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_err(path))?;

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(path, "missing container magic"));
    }
    let header_len =
        u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| {
        format_err(path, "header length overflows")
    })?;
    if bytes.len() < header_end {
        return Err(format_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| format_err(path, format!("bad header JSON: {e}")))?;

    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| format_err(path, "RNG seed must be 32 bytes"))?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| format_err(path, "bad RNG word position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let mut params = ParamStore::new();
    let mut offset = header_end;
    for entry in &header.arrays {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if bytes.len() < end {
            return Err(format_err(path, format!("truncated payload at array {}", entry.name)));
        }
        let values: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| format_err(path, format!("array {}: {e}", entry.name)))?;
        match entry.kind {
            ArrayKind::Param => params.insert(entry.name.clone(), array),
            ArrayKind::Velocity => params.set_velocity(entry.name.clone(), array),
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(path, "trailing bytes after the last array"));
    }
    Ok(Checkpoint { config: header.config, step: header.step, rng, params })
}
