//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, JSON
//! header, little-endian `f64` tensor data, then a `u64` FNV-1a checksum of
//! the tensor bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, HeadActivation, ModelParameters};
use crate::error::{Error, Result};
use crate::mil::{AttentionNormalization, AttentionParameters};

const MAGIC: &[u8; 8] = b"GLMILCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    head_activation: HeadActivation,
    init_seed: u64,
    attention: Option<AttentionHeader>,
    tensor_lens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AttentionHeader {
    hidden: usize,
    feature_dim: usize,
    classes: usize,
    normalization: AttentionNormalization,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn encode_checkpoint(params: &ModelParameters) -> Vec<u8> {
    let header = Header {
        config: params.config.clone(),
        head_activation: params.head_activation,
        init_seed: params.init_seed,
        attention: params.attention.as_ref().map(|a| AttentionHeader {
            hidden: a.hidden(),
            feature_dim: a.feature_dim(),
            classes: a.classes(),
            normalization: a.normalization,
        }),
        tensor_lens: params.tensors().iter().map(|t| t.len()).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let data: Vec<u8> = params
        .tensors()
        .iter()
        .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let mut out = Vec::with_capacity(16 + header.len() + data.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&fnv1a(&data).to_le_bytes());
    out.extend_from_slice(&data);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParameters> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end + 8 {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let checksum = u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap());
    let data = &bytes[header_end + 8..];
    let total: usize = header.tensor_lens.iter().sum();
    if data.len() != total * 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensor bytes, found {}",
            total * 8,
            data.len()
        )));
    }
    if fnv1a(data) != checksum {
        return Err(corrupt("checksum mismatch"));
    }

    let mut params = ModelParameters::init(header.config, header.head_activation, header.init_seed)?;
    if let Some(a) = &header.attention {
        let att = AttentionParameters::zeros(a.feature_dim, a.hidden, a.classes, a.normalization);
        params = params.with_attention(att)?;
    }
    let expected: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if expected != header.tensor_lens {
        return Err(Error::ShapeMismatch {
            expected: format!("tensor lengths {expected:?}"),
            found: format!("{:?}", header.tensor_lens),
        });
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if !params.all_finite() {
        return Err(corrupt("non-finite weights"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    crate::io::ensure_parent(path)?;
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
