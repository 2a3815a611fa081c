//! Binary weights file: magic, version, JSON config block, then f32 tensors
//! (weight then bias of every convolution in declaration order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use scanfeat_core::io::{put_f32, put_u32, read_all, write_atomic, Reader};

use crate::data::DatasetStats;
use crate::error::{NetError, Result};
use crate::network::{Network, NetworkConfig};

const MAGIC: &[u8; 4] = b"W3DL";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    stats: Option<DatasetStats>,
}

pub fn encode_weights(net: &Network, stats: Option<&DatasetStats>) -> Result<Vec<u8>> {
    net.check()?;
    let header = serde_json::to_vec(&Header {
        network: net.config.clone(),
        stats: stats.copied(),
    })
    .map_err(|e| NetError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    for c in net.convs() {
        for x in c.weight.iter().chain(&c.bias) {
            put_f32(&mut out, *x as f32);
        }
    }
    Ok(out)
}

pub fn decode_weights(buf: &[u8]) -> Result<(Network, Option<DatasetStats>)> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.bytes(len)?).map_err(|e| NetError::Format(e.to_string()))?;
    let mut net = Network::new(header.network, 0)?;
    for c in net.convs_mut() {
        let w = r.f32s(c.weight.len())?;
        let b = r.f32s(c.bias.len())?;
        for (x, v) in c.weight.iter_mut().zip(w).chain(c.bias.iter_mut().zip(b)) {
            *x = v as f64;
        }
    }
    if r.remaining() != 0 {
        return Err(NetError::ShapeMismatch(format!("{} bytes beyond the configured tensors", r.remaining())));
    }
    Ok((net, header.stats))
}

pub fn save_weights(path: &Path, net: &Network, stats: Option<&DatasetStats>) -> Result<()> {
    Ok(write_atomic(path, &encode_weights(net, stats)?)?)
}

pub fn load_weights(path: &Path) -> Result<(Network, Option<DatasetStats>)> {
    decode_weights(&read_all(path)?)
}

/// Rounds every parameter to f32, as a save/load cycle would.
pub fn quantize_f32(net: &mut Network) {
    for c in net.convs_mut() {
        for x in c.weight.iter_mut().chain(c.bias.iter_mut()) {
            *x = *x as f32 as f64;
        }
    }
}
