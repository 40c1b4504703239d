//! Binary model checkpoints.
//!
//! Layout: magic `LSDA`, u32 version, u32-length-prefixed JSON architecture,
//! u32 parameter count, then per parameter: prefixed name, u32 rank, u32 dims,
//! little-endian f32 values.

use std::fs;
use std::path::Path;

use super::{ArchConfig, ModelBundle};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSDA";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.prefixed(&serde_json::to_vec(&self.config).expect("config serialises"));
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.prefixed(p.name.as_bytes());
            w.u32(p.tensor.shape().len() as u32);
            for &d in p.tensor.shape() {
                w.u32(d as u32);
            }
            w.f32s(p.tensor.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            r = ByteReader::new(bytes);
            r.take(4)?;
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let config: ArchConfig = serde_json::from_slice(r.prefixed()?).map_err(|e| {
            crate::Error::Format {
                offset: at,
                msg: format!("bad architecture JSON: {e}"),
            }
        })?;
        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.prefixed_str()?.to_owned();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.err(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.err("shape overflow"))?;
            let data = r.f32s(numel)?;
            named.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        ModelBundle::from_named(config, named)
    }
}

pub fn write_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bundle.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelBundle> {
    ModelBundle::from_bytes(&fs::read(path)?)
}
