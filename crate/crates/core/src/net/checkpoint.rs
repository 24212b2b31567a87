use std::fs;
use std::path::Path;

use crate::codec::write_atomic;
use crate::error::{LensError, Result};
use crate::net::{LensConfig, LensNet};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LENSNET1";

/// Magic, config header (six u32 dims and the gate logit as f64), parameter
/// count as u64, then every tensor in layout order as f64, all little-endian.
pub fn encode_checkpoint(net: &LensNet) -> Result<Vec<u8>> {
    let c = net.config();
    let mut out = Vec::with_capacity(8 + 24 + 16 + 8 * net.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        c.n_tokens,
        c.coeff_dim,
        c.hidden,
        c.n_layers,
        c.n_heads,
        c.embed_dim,
    ] {
        let v = u32::try_from(v)
            .map_err(|_| LensError::Format(format!("dimension {v} exceeds 32 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.gate_init_logit.to_le_bytes());
    out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LensNet> {
    let short = || LensError::Format("truncated checkpoint".into());
    if bytes.len() < 48 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(LensError::Format("not a LENSNET1 checkpoint".into()));
    }
    let u32_at =
        |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let config = LensConfig {
        n_tokens: u32_at(8),
        coeff_dim: u32_at(12),
        hidden: u32_at(16),
        n_layers: u32_at(20),
        n_heads: u32_at(24),
        embed_dim: u32_at(28),
        gate_init_logit: f64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")),
    };
    config.validate()?;
    let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    if count != config.param_count() {
        return Err(LensError::Format(format!(
            "checkpoint holds {count} parameters, config implies {}",
            config.param_count()
        )));
    }
    let body = &bytes[48..];
    if body.len() != 8 * count {
        return Err(short());
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = config
        .layout()
        .into_iter()
        .map(|(_, [r, c])| Tensor::matrix(r, c, values.by_ref().take(r * c).collect()))
        .collect::<Result<Vec<_>>>()?;
    LensNet::from_params(config, params)
}

pub fn save_checkpoint(net: &LensNet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<LensNet> {
    decode_checkpoint(&fs::read(path)?)
}
