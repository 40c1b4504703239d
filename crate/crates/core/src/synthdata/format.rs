//! Dataset files.
//!
//! Layout: magic `LSDS`, u32 version, u32-length-prefixed JSON manifest, then
//! one record per sample: u32 payload length, payload, u32 CRC32 of the
//! payload. A payload is `H·W` f32 intensities, `H·W` u8 labels, u64 seed,
//! u64 index, u8 corruption code and f32 severity.

use std::fs;
use std::path::Path;

use super::{Corruption, Dataset, Manifest, Sample, SampleMeta};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"LSDS";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.prefixed(&serde_json::to_vec(&self.manifest)?);
        for s in &self.samples {
            let mut p = ByteWriter::new();
            p.f32s(s.image.data());
            p.bytes(&s.labels);
            p.u64(s.meta.seed);
            p.u64(s.meta.index);
            p.u8(s.meta.corruption.map_or(0, Corruption::code));
            p.f32(s.meta.severity);
            w.prefixed(&p.buf);
            w.u32(crc32fast::hash(&p.buf));
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported dataset version {version}"),
            });
        }
        let at = r.offset();
        let manifest: Manifest = serde_json::from_slice(r.prefixed()?).map_err(|e| Error::Format {
            offset: at,
            msg: format!("bad manifest: {e}"),
        })?;
        let hw = manifest
            .height
            .checked_mul(manifest.width)
            .ok_or_else(|| r.err("image extent overflow"))?;
        let payload_len = hw * 5 + 8 + 8 + 1 + 4;
        let mut samples = Vec::with_capacity(manifest.count.min(1 << 16));
        for record in 0..manifest.count {
            let start = r.offset();
            let payload = r.prefixed()?;
            if payload.len() != payload_len {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("record {record} has {} payload bytes, expected {payload_len}", payload.len()),
                });
            }
            let crc_at = r.offset();
            let crc = r.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checksum {
                    record,
                    offset: crc_at,
                });
            }
            let mut p = ByteReader::new(payload);
            let image = Tensor::new(&[1, manifest.height, manifest.width], p.f32s(hw)?)?;
            let labels = p.take(hw)?.to_vec();
            let seed = p.u64()?;
            let index = p.u64()?;
            let code = p.u8()?;
            let corruption = Corruption::from_code(code).ok_or_else(|| Error::Format {
                offset: start + 4 + p.offset() - 1,
                msg: format!("unknown corruption code {code}"),
            })?;
            let severity = p.f32()?;
            samples.push(Sample {
                image,
                labels,
                meta: SampleMeta {
                    seed,
                    index,
                    corruption,
                    severity,
                },
            });
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        let ds = Dataset { manifest, samples };
        ds.validate().map_err(|e| Error::Format {
            offset: bytes.len() as u64,
            msg: format!("inconsistent dataset: {e}"),
        })?;
        Ok(ds)
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = ds.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
