//! Checkpoint files: a little-endian `u32` header length, a JSON header,
//! then the parameter vector as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{NetSpec, Network};
use crate::error::{DefError, Result};

pub const FORMAT: &str = "def-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub net: NetSpec,
    pub step: u64,
    pub num_params: usize,
    /// Model-specific metadata (normalization stats, schedule, ...).
    pub extra: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    net: &Network,
    step: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        net: net.spec().clone(),
        step,
        num_params: net.num_params(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| DefError::Format("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(net.num_params() * 4);
    for v in &net.store.values {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Network)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format != FORMAT {
        return Err(DefError::Format(format!("unknown checkpoint format {}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.num_params * 4 {
        return Err(DefError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.num_params * 4
        )));
    }
    let mut net = Network::new(&header.net, 0)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    net.store.load_values(values)?;
    Ok((header, net))
}

pub fn save(path: &Path, net: &Network, step: u64, extra: serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, net, step, extra)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Network)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
