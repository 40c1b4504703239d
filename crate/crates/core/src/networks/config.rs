use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of every encoder/decoder pair in the model.
///
/// `widths.len()` is the number of 2× downsamplings between the image and the
/// latent code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Segmentation classes including background.
    pub classes: usize,
    pub widths: Vec<usize>,
    pub latent_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            height: 64,
            width: 64,
            classes: 4,
            widths: vec![16, 32, 64],
            latent_channels: 64,
        }
    }
}

impl ArchConfig {
    /// Reduced widths for tests and quick experiments.
    pub fn tiny(size: usize) -> Self {
        ArchConfig {
            height: size,
            width: size,
            classes: 4,
            widths: vec![4, 8, 8],
            latent_channels: 8,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `(c, h, w)` of the latent code.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let f = 1 << self.depth();
        (self.latent_channels, self.height / f, self.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::contract("widths must be non-empty and positive"));
        }
        if self.latent_channels == 0 {
            return Err(Error::contract("latent_channels must be positive"));
        }
        if self.classes < 2 || self.classes > u8::MAX as usize {
            return Err(Error::contract(format!("classes must be in 2..=255, got {}", self.classes)));
        }
        let f = 1usize << self.depth();
        for (axis, n) in [("height", self.height), ("width", self.width)] {
            if n == 0 || n % f != 0 {
                return Err(Error::Dimension {
                    op: "ArchConfig",
                    axis: axis.into(),
                    expected: (n / f).max(1) * f,
                    found: n,
                });
            }
        }
        Ok(())
    }
}
