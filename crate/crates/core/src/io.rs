//! `DEF1` binary grid files.
//!
//! Layout: the magic bytes `DEF1`, five little-endian `u32` header fields
//! `v, f, h, w, n_states`, then `n_states * (v + f) * h * w` little-endian
//! `f32` values, state-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DefError, Result};
use crate::grid::{FieldState, GridShape};

pub const MAGIC: &[u8; 4] = b"DEF1";

pub fn write_states<W: Write>(mut w: W, states: &[FieldState]) -> Result<()> {
    let shape = states.first().ok_or(DefError::Empty("states"))?.shape();
    w.write_all(MAGIC)?;
    for field in [shape.vars, shape.forcings, shape.height, shape.width, states.len()] {
        let field = u32::try_from(field)
            .map_err(|_| DefError::Format(format!("header field {field} exceeds u32")))?;
        w.write_all(&field.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(shape.len() * 4);
    for s in states {
        if s.shape() != shape {
            return Err(crate::error::shape_err(shape, s.shape()));
        }
        buf.clear();
        for x in s.data() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads every state; time indices are assigned `first_time, first_time + 1, ...`.
pub fn read_states<R: Read>(mut r: R, first_time: u64) -> Result<(GridShape, Vec<FieldState>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DefError::Format(format!("bad magic {magic:?}")));
    }
    let mut header = [0usize; 5];
    for field in &mut header {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *field = u32::from_le_bytes(b) as usize;
    }
    let [vars, forcings, height, width, n] = header;
    let shape = GridShape { vars, forcings, height, width };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = n * shape.len() * 4;
    if payload.len() != expected {
        return Err(DefError::Format(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let states = payload
        .chunks_exact((shape.len() * 4).max(1))
        .take(n)
        .enumerate()
        .map(|(i, chunk)| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            FieldState::new(shape, first_time + i as u64, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, states))
}

pub fn save(path: &Path, states: &[FieldState]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_states(&mut w, states)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(GridShape, Vec<FieldState>)> {
    let f = std::fs::File::open(path)?;
    read_states(std::io::BufReader::new(f), 0)
}
