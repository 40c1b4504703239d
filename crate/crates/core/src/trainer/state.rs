//! Optimiser state files.
//!
//! Layout: magic `LSTS`, u32 version, u32-length-prefixed JSON header
//! (config, completed epochs, step, best validation score), u64 Adam step,
//! then the first and second moments of every parameter in model order as
//! little-endian f32. The model itself lives in a separate checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, BestVal, TrainConfig, Trainer};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::networks::read_checkpoint;
use crate::tensor::Tensor;

pub const STATE_MAGIC: &[u8; 4] = b"LSTS";
pub const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    best: Option<BestVal>,
}

pub fn write_state(path: &Path, t: &Trainer) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(STATE_MAGIC);
    w.u32(STATE_VERSION);
    let header = Header {
        config: t.config.clone(),
        epoch: t.epoch,
        step: t.step,
        best: t.best.clone(),
    };
    w.prefixed(&serde_json::to_vec(&header)?);
    w.u64(t.adam.t);
    for (m, v) in t.adam.m.iter().zip(&t.adam.v) {
        w.f32s(m.data());
        w.f32s(v.data());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, w.buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_state(path: &Path, checkpoint: &Path) -> Result<Trainer> {
    let bundle = read_checkpoint(checkpoint)?;
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(STATE_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != STATE_VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported state version {version}"),
        });
    }
    let at = r.offset();
    let h: Header = serde_json::from_slice(r.prefixed()?).map_err(|e| Error::Format {
        offset: at,
        msg: format!("bad state header: {e}"),
    })?;
    if h.config.arch != *bundle.config() {
        return Err(Error::contract("state and checkpoint disagree on the architecture"));
    }
    let t = r.u64()?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in bundle.params() {
        let shape = p.tensor.shape();
        m.push(Tensor::new(shape, r.f32s(p.tensor.numel())?)?);
        v.push(Tensor::new(shape, r.f32s(p.tensor.numel())?)?);
    }
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Trainer {
        config: h.config,
        bundle,
        adam: AdamState { t, m, v },
        epoch: h.epoch,
        step: h.step,
        best: h.best,
    })
}
