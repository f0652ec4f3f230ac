//! Binary policy checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 4                | magic `DNCP`                                   |
//! | 4 (u32)          | format version (currently 1)                   |
//! | 4 (u32)          | number of layer sizes `L` (input..output)      |
//! | 4·L (u32)        | layer sizes                                    |
//! | 8·P (f64)        | flattened mean-network parameters              |
//! | 8·A (f64)        | log standard deviations (A = last layer size)  |

use std::fs;
use std::path::Path;

use crate::error::{DncError, Result};
use crate::nn::MlpParams;
use crate::policy::GaussianPolicy;

pub const MAGIC: &[u8; 4] = b"DNCP";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_policy(policy: &GaussianPolicy) -> Vec<u8> {
    let sizes = policy.mean_net().layer_sizes();
    let flat = policy.mean_net().flatten();
    let mut out = Vec::with_capacity(12 + 4 * sizes.len() + 8 * (flat.len() + policy.action_dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for v in flat.iter().chain(policy.log_std()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DncError::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_policy(bytes: &[u8]) -> Result<GaussianPolicy> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DncError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DncError::Checkpoint(format!("unsupported version {version}")));
    }
    let n_sizes = r.u32()? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(DncError::Checkpoint(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let template = MlpParams::zeros(&sizes).map_err(|e| DncError::Checkpoint(e.to_string()))?;
    let flat = (0..template.param_count())
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    let log_std = (0..template.output_dim())
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(DncError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    GaussianPolicy::from_parts(template.unflatten(&flat)?, log_std)
}

pub fn save_policy(policy: &GaussianPolicy, path: &Path) -> Result<()> {
    fs::write(path, encode_policy(policy)).map_err(|e| DncError::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    let bytes = fs::read(path).map_err(|e| DncError::io(path, e))?;
    decode_policy(&bytes)
}
