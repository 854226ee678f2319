//! Flat binary checkpoints.
//!
//! Layout:
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 8            | magic `RLABCKPT`                                    |
//! | 8            | header length `n` (u64, little endian)              |
//! | n            | UTF-8 JSON header                                   |
//! | rest         | tensor data, f64 little endian, in header order     |
//!
//! The header carries the model configuration, every tensor's name, shape,
//! byte offset (relative to the start of the data section) and element count,
//! the total data length and the SHA-256 of the data section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, TENSOR_NAMES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RLABCKPT";
const FORMAT: &str = "recency-lab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    data_bytes: u64,
    data_sha256: String,
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ModelParams) -> std::io::Result<()> {
    let mut data = Vec::with_capacity(params.num_parameters() * 8);
    let mut tensors = Vec::new();
    for t in params.tensors() {
        tensors.push(TensorEntry {
            name: t.name.to_string(),
            shape: t.shape,
            offset: data.len() as u64,
            length: t.data.len() as u64,
        });
        for v in t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: params.config,
        tensors,
        data_bytes: data.len() as u64,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&data)?;
    out.flush()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::invalid(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| corrupt(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[data_start..];
    if data.len() as u64 != header.data_bytes {
        return Err(corrupt(format!(
            "data section has {} bytes, header says {}",
            data.len(),
            header.data_bytes
        )));
    }
    if hex::encode(Sha256::digest(data)) != header.data_sha256 {
        return Err(corrupt("data checksum mismatch"));
    }
    let mut params = ModelParams::zeros(header.config).map_err(|e| corrupt(e.to_string()))?;
    if header.tensors.len() != TENSOR_NAMES.len() {
        return Err(corrupt("wrong number of tensors"));
    }
    let expected: Vec<[usize; 2]> = params.tensors().iter().map(|t| t.shape).collect();
    for (((name, dst), entry), shape) in params
        .tensors_mut()
        .into_iter()
        .zip(&header.tensors)
        .zip(expected)
    {
        if entry.name != name || entry.shape != shape || entry.length as usize != dst.len() {
            return Err(corrupt(format!(
                "tensor {} has shape {:?}, expected {name} with shape {shape:?}",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + dst.len() * 8;
        let chunk = data
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor {name} overruns the data section")))?;
        for (v, b) in dst.iter_mut().zip(chunk.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter values"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
