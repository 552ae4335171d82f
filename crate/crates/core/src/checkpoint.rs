//! Binary policy checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 8     | magic `LENSPOL\0`               |
//! | 4     | format version (u32, = 1)       |
//! | 4     | vocabulary size V (u32)         |
//! | 4     | embedding dim d (u32)           |
//! | 4     | context window W (u32)          |
//! | 16·V·d| flat parameters as f64          |
//!
//! Temperature is a sampling setting and is not stored.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::policy::{PolicyConfig, PolicyParams};

pub const MAGIC: &[u8; 8] = b"LENSPOL\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::with_capacity(24 + 8 * params.flat().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(c.embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.window as u32).to_le_bytes());
    for x in params.flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8], temperature: f64) -> Result<PolicyParams, CheckpointError> {
    if bytes.len() < 24 {
        return Err(CheckpointError::Truncated {
            expected: 24,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(bytes, 8);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = PolicyConfig {
        vocab_size: read_u32(bytes, 12) as usize,
        embed_dim: read_u32(bytes, 16) as usize,
        window: read_u32(bytes, 20) as usize,
        temperature,
    };
    let body = &bytes[24..];
    let expected = config.num_params() * 8;
    if body.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: body.len(),
        });
    }
    let flat = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(PolicyParams::from_flat(config, flat)?)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save(params: &PolicyParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(params))?;
    Ok(())
}

pub fn load(path: &Path, temperature: f64) -> Result<PolicyParams, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, temperature)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
