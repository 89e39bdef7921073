//! Binary checkpoint format.
//!
//! ```text
//! magic   b"GMCK"
//! version u32
//! in_ch   u32
//! layers  u32, then per layer: kind u8, a u32, b u32
//! params  u64 count, then little-endian f32 values
//! ```
//! Integers are little-endian. For convolutions `a, b` are the input and
//! output channels; for residual adds `a` is the source activation.

use std::path::Path;

use super::network::{Layer, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GMCK";
pub const VERSION: u32 = 1;

pub fn encode(net: &Network, params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.layers().len() * 9 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.in_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        let (kind, a, b) = match *layer {
            Layer::Conv1x1 { cin, cout } => (0u8, cin, cout),
            Layer::Conv3x3 { cin, cout } => (1, cin, cout),
            Layer::Relu => (2, 0, 0),
            Layer::ResidualAdd { from } => (3, from, 0),
        };
        out.push(kind);
        out.extend_from_slice(&(a as u32).to_le_bytes());
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Network, Vec<f64>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let in_channels = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let kind = r.take(1)?[0];
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        layers.push(match kind {
            0 => Layer::Conv1x1 { cin: a, cout: b },
            1 => Layer::Conv3x3 { cin: a, cout: b },
            2 => Layer::Relu,
            3 => Layer::ResidualAdd { from: a },
            k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
        });
    }
    let net = Network::new(in_channels, layers)?;
    let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    if count != net.num_params() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, layers need {}",
            net.num_params()
        )));
    }
    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((net, params))
}

pub fn save(path: &Path, net: &Network, params: &[f64]) -> Result<()> {
    std::fs::write(path, encode(net, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
