//! Versioned binary checkpoints:
//! `b"DMTC" | u32 LE version | u32 LE header length | JSON header | f32 LE parameters`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, Network};
use crate::error::{DmtError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DMTC";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    init_seed: u64,
    param_lengths: Vec<usize>,
}

/// Writes `net` to `path` and returns the file's SHA-256 (hex).
pub fn write_checkpoint(net: &Network, path: &Path) -> Result<String> {
    let params = net.params();
    let header = Header {
        architecture: net.architecture().clone(),
        init_seed: net.init_seed(),
        param_lengths: params.iter().map(|p| p.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * net.num_params());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in params {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    // write-then-rename so an interrupted run never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| DmtError::format(path, e.to_string()))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(DmtError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DmtError::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| DmtError::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| DmtError::format(path, format!("bad header: {e}")))?;
    let mut net = Network::new(header.architecture, header.init_seed);
    let mut offset = 12 + hlen;
    let mut values = Vec::with_capacity(header.param_lengths.len());
    for len in header.param_lengths {
        let chunk = bytes
            .get(offset..offset + 4 * len)
            .ok_or_else(|| DmtError::format(path, "truncated parameters"))?;
        values.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
        offset += 4 * len;
    }
    if offset != bytes.len() {
        return Err(DmtError::format(path, "trailing bytes after parameters"));
    }
    net.set_params(&values)
        .map_err(|e| DmtError::format(path, e.to_string()))?;
    Ok(net)
}
