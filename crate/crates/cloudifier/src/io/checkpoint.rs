//! The checkpoint file format.
//!
//! Little-endian. Header: magic "CFNW", version u32, descriptor length u32,
//! UTF-8 architecture descriptor (the textual network config). Body, per
//! state tensor in declaration order: name length u16 + name bytes, ndim u8
//! (always 4), dims u32 each, then 32-bit float data. A rebuilt network must
//! accept exactly the stored tensors; the round trip is byte-identical.

use std::fs;
use std::path::Path;

use super::{atomic_write, Reader};
use crate::error::Result;
use crate::graph::{build_network, Network, NetworkConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFNW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the architecture descriptor and all persisted state.
pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let descriptor = net.config().to_descriptor();
    let entries = net.state_entries();

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    for (name, dims, data) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

/// Rebuild the network from its descriptor and load every stored tensor.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(&CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let desc_len = r.u32()? as usize;
    let descriptor = std::str::from_utf8(r.take(desc_len)?)
        .map_err(|_| r.corrupt("descriptor is not valid UTF-8"))?
        .to_string();
    let config = NetworkConfig::from_descriptor(&descriptor)
        .map_err(|e| r.corrupt(format!("descriptor rejected: {e}")))?;
    let mut net = build_network(config)?;

    let mut entries = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("tensor name is not valid UTF-8"))?
            .to_string();
        let ndim = r.u8()?;
        if ndim != 4 {
            return Err(r.corrupt(format!("tensor '{name}': expected 4 dims, got {ndim}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let count: usize = dims.iter().product();
        let data = r.f32_vec(count)?;
        entries.push((name, dims, data));
    }
    net.apply_state(&entries).map_err(|e| r.corrupt(e.to_string()))?;
    Ok(net)
}
