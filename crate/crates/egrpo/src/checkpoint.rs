//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field         | type              |
//! |---------------|-------------------|
//! | magic         | `b"EGRPOCKP"`     |
//! | version       | u32 (currently 1) |
//! | dim           | u32               |
//! | conditions    | u32               |
//! | layer count   | u32               |
//! | layer sizes   | u32 each          |
//! | seed          | u64               |
//! | param count   | u64               |
//! | params        | f64 each          |
//!
//! Nothing may follow the parameters.

use std::path::Path;

use egrpo_core::model::VelocityModel;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"EGRPOCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VelocityModel,
    /// Seed of the run that produced the weights.
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::with_capacity(40 + 4 * m.layer_sizes().len() + 8 * m.params().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(m.conditions() as u32).to_le_bytes());
        out.extend_from_slice(&(m.layer_sizes().len() as u32).to_le_bytes());
        for &s in m.layer_sizes() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(m.params().len() as u64).to_le_bytes());
        for p in m.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Decodes a checkpoint; `Err` carries a human-readable reason.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dim = r.u32()? as usize;
        let conditions = r.u32()? as usize;
        let layers = r.u32()? as usize;
        if layers > 1024 {
            return Err(format!("implausible layer count {layers}"));
        }
        let layer_sizes = (0..layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        if count.checked_mul(8) != Some(bytes.len() - r.pos) {
            return Err(format!(
                "parameter count {count} does not match {} trailing bytes",
                bytes.len() - r.pos
            ));
        }
        let params = (0..count).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let model = VelocityModel::from_parts(dim, conditions, layer_sizes, params)
            .map_err(|e| e.to_string())?;
        Ok(Self { model, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
