//! Manifests and plain-text dumps written by the commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lsda_core::Tensor;
use serde_json::{json, Value};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "data.lsds";

/// Everything needed to rerun a command: its resolved settings plus the
/// versions of the formats it read or wrote.
pub fn write_manifest(path: &Path, command: &str, settings: Value) -> Result<(), CliError> {
    let doc = json!({
        "tool": "lsda",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "settings": settings,
        "formats": {
            "checkpoint": lsda_core::networks::CHECKPOINT_VERSION,
            "dataset": lsda_core::synthdata::DATASET_VERSION,
            "trainer_state": lsda_core::trainer::STATE_VERSION,
            "generator": lsda_core::synthdata::GENERATOR_VERSION,
        },
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Binary 8-bit PGM of a row-major map, linearly scaled from `[lo, hi]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32], lo: f32, hi: f32) -> Result<(), CliError> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// One row per channel of a `[C,H,W]` tensor, `H·W` comma-separated values.
pub fn write_channels_csv(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let (c, h, w) = t.chw("write_channels_csv")?;
    let mut s = String::new();
    for k in 0..c {
        let row = &t.data()[k * h * w..(k + 1) * h * w];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
