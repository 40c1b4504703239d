//! Seeded phantom datasets standing in for cardiac MR: a bright cavity inside
//! a darker wall ring, next to a crescent, plus four artifact families.

mod corrupt;
mod format;
mod phantom;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Pair;
use crate::networks::SegProb;
use crate::tensor::Tensor;

pub use corrupt::{corrupt_bias, corrupt_ghost, corrupt_motion, corrupt_spike, Corruption, BIAS_GAIN, SPIKE_GAIN};
pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use phantom::{phantom, PhantomStyle, MAX_GEOMETRY_ATTEMPTS};

pub const GENERATOR_VERSION: u32 = 1;
pub const CLASSES: usize = 4;
pub const SEVERITY_LEVELS: [f32; 3] = [0.3, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub corruption: Option<Corruption>,
    pub severity: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1,H,W]` in `[0,1]`.
    pub image: Tensor,
    /// Row-major class indices.
    pub labels: Vec<u8>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        Ok(SegProb::one_hot(&self.labels, classes, self.height(), self.width())?.0)
    }

    pub fn to_pair(&self, classes: usize) -> Result<Pair> {
        Ok(Pair {
            x: self.image.clone(),
            y: self.one_hot(classes)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    TestCorrupted(Corruption),
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
            Split::TestCorrupted(c) => write!(f, "test-corrupted:{}", c.name()),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => match s.strip_prefix("test-corrupted:") {
                Some(kind) => Ok(Split::TestCorrupted(kind.parse()?)),
                None => Err(Error::contract(format!("unknown split {s:?}"))),
            },
        }
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
    /// First sample index; sample `k` uses index `first_index + k`.
    pub first_index: u64,
    pub shifted: bool,
    pub corruption: Option<Corruption>,
    /// Fixed severity, or `None` when drawn per sample from the default levels.
    pub severity: Option<f32>,
    pub corruption_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs(&self) -> Result<Vec<Pair>> {
        self.samples.iter().map(|s| s.to_pair(self.manifest.classes)).collect()
    }

    /// Checks every sample against the manifest's extents and class count.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.samples.len() != m.count {
            return Err(Error::dim("Dataset", "samples", m.count, self.samples.len()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            s.image.expect_shape("Dataset", &[1, m.height, m.width])?;
            if s.labels.len() != m.height * m.width {
                return Err(Error::dim("Dataset", "labels", m.height * m.width, s.labels.len()));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l as usize >= m.classes) {
                return Err(Error::contract(format!("sample {i}: label {l} >= {}", m.classes)));
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("sample {i}: intensity outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic in `(seed, index)`.
pub fn gen_sample(seed: u64, index: u64, height: usize, width: usize, style: &PhantomStyle) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let (image, labels) = phantom(&mut rng, height, width, style)?;
    Ok(Sample {
        image,
        labels,
        meta: SampleMeta {
            seed,
            index,
            corruption: None,
            severity: 0.0,
        },
    })
}

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub first_index: u64,
    pub shifted: bool,
    pub severity: Option<f32>,
}

impl GenRequest {
    pub fn new(split: Split, count: usize, seed: u64) -> Self {
        GenRequest {
            split,
            height: 64,
            width: 64,
            count,
            seed,
            first_index: 0,
            shifted: false,
            severity: None,
        }
    }
}

pub fn generate(req: &GenRequest) -> Result<Dataset> {
    let style = if req.shifted {
        PhantomStyle::shifted()
    } else {
        PhantomStyle::standard()
    };
    let corruption = match req.split {
        Split::TestCorrupted(c) => Some(c),
        _ => None,
    };
    if let Some(s) = req.severity {
        if corruption.is_none() {
            return Err(Error::contract("severity given without a corruption"));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::contract(format!("severity {s} outside [0,1]")));
        }
    }
    let corruption_seed = corruption.map(|c| req.seed ^ (0xC0FF_EE00 + c.code() as u64));
    let mut samples = Vec::with_capacity(req.count);
    for k in 0..req.count as u64 {
        let index = req.first_index + k;
        let mut s = gen_sample(req.seed, index, req.height, req.width, &style)?;
        if let (Some(c), Some(cs)) = (corruption, corruption_seed) {
            let mut rng = sample_rng(cs, index);
            let sev = match req.severity {
                Some(v) => v,
                None => SEVERITY_LEVELS[rand::Rng::gen_range(&mut rng, 0..SEVERITY_LEVELS.len())],
            };
            s.image = c.apply(&s.image, sev, &mut rng)?;
            s.meta.corruption = Some(c);
            s.meta.severity = sev;
        }
        samples.push(s);
    }
    Ok(Dataset {
        manifest: Manifest {
            generator_version: GENERATOR_VERSION,
            split: req.split,
            height: req.height,
            width: req.width,
            classes: CLASSES,
            count: req.count,
            seed: req.seed,
            first_index: req.first_index,
            shifted: req.shifted,
            corruption,
            severity: req.severity,
            corruption_seed,
        },
        samples,
    })
}

/// The evaluation suite of one experiment.
#[derive(Clone, Debug)]
pub struct Suite {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Corrupted copies of the test images, one per corruption kind.
    pub corrupted: Vec<Dataset>,
    pub shifted: Dataset,
}

#[derive(Clone, Debug)]
pub struct SuiteSizes {
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            size: 64,
            train: 10,
            val: 10,
            test: 20,
        }
    }
}

/// Train, val and test use disjoint index ranges of the same seed; the
/// corrupted sets share the test indices, so their labels match the test set.
pub fn default_suite(seed: u64, sizes: &SuiteSizes) -> Result<Suite> {
    let req = |split, count, first: usize| GenRequest {
        height: sizes.size,
        width: sizes.size,
        first_index: first as u64,
        ..GenRequest::new(split, count, seed)
    };
    let test_start = sizes.train + sizes.val;
    Ok(Suite {
        train: generate(&req(Split::Train, sizes.train, 0))?,
        val: generate(&req(Split::Val, sizes.val, sizes.train))?,
        test: generate(&req(Split::Test, sizes.test, test_start))?,
        corrupted: Corruption::ALL
            .iter()
            .map(|&c| generate(&req(Split::TestCorrupted(c), sizes.test, test_start)))
            .collect::<Result<_>>()?,
        shifted: generate(&GenRequest {
            shifted: true,
            ..req(Split::Test, sizes.test, test_start + sizes.test)
        })?,
    })
}

/// Normalised histogram of all pixel intensities.
pub fn intensity_histogram(ds: &Dataset, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0f64; bins];
    let mut n = 0usize;
    for s in &ds.samples {
        for &v in s.image.data() {
            let b = ((v * bins as f32) as usize).min(bins - 1);
            h[b] += 1.0;
            n += 1;
        }
    }
    if n > 0 {
        for v in &mut h {
            *v /= n as f64;
        }
    }
    h
}

pub fn histogram_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests;
