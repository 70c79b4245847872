//! Flat binary checkpoints.
//!
//! Each network is written as the magic bytes `WCRIT1`, the number of layer
//! widths and the widths themselves as little-endian `u64`, then every
//! parameter as a little-endian `f64` in storage order (per layer: the
//! row-major weight matrix, then the bias). A file holds one or more such
//! blocks back to back.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, NetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"WCRIT1";

pub fn write_checkpoint(path: &Path, nets: &[&NetParams]) -> Result<()> {
    let mut buf = Vec::new();
    for net in nets {
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(net.dims().len() as u64).to_le_bytes());
        for &d in net.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in net.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every block; activations are not stored and must be supplied, one
/// `(hidden, output)` pair per block.
pub fn read_checkpoint(path: &Path, activations: &[(Activation, Activation)]) -> Result<Vec<NetParams>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let out = &bytes[pos..end];
        pos = end;
        Ok(out)
    };
    let mut nets = Vec::new();
    for &(hidden, output) in activations {
        if take(6)? != CHECKPOINT_MAGIC {
            return Err(bad("missing WCRIT1 magic"));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let n_dims = u64_at(take(8)?);
        if !(2..=64).contains(&n_dims) {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u64_at(take(8)?));
        }
        let template = NetParams::zeros(&dims, hidden, output)?;
        let mut data = Vec::with_capacity(template.n_params());
        for _ in 0..template.n_params() {
            data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        nets.push(NetParams::from_flat(&dims, hidden, output, data)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last network"));
    }
    Ok(nets)
}
