//! Dice scores and per-domain evaluation reports.

mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelBundle, SegProb};
use crate::synthdata::Dataset;

pub use report::{box_plot_svg, read_report_csv, report_csv, write_report_csv, CsvRow, CSV_HEADER};

/// `2|P∩G| / (|P|+|G|)` for one class; 1.0 when the class is absent from both.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("dice", "pixels", gt.len(), pred.len()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ftn")]
    Ftn,
    #[serde(rename = "ftn+stn")]
    FtnStn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ftn => "ftn",
            Stage::FtnStn => "ftn+stn",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ftn" => Ok(Stage::Ftn),
            "ftn+stn" => Ok(Stage::FtnStn),
            _ => Err(Error::contract(format!("unknown stage {s:?}"))),
        }
    }
}

/// Dice of every sample in one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainReport {
    pub domain: String,
    pub stage: Stage,
    pub classes: usize,
    /// `per_sample[i][c]` is the Dice of class `c` on sample `i`.
    pub per_sample: Vec<Vec<f64>>,
}

impl DomainReport {
    pub fn count(&self) -> usize {
        self.per_sample.len()
    }

    pub fn class_mean(&self, class: usize) -> f64 {
        mean(self.per_sample.iter().map(|d| d[class]))
    }

    pub fn class_std(&self, class: usize) -> f64 {
        std(self.per_sample.iter().map(|d| d[class]))
    }

    /// Mean over classes `1..C` of one sample.
    pub fn sample_foreground(&self, i: usize) -> f64 {
        mean(self.per_sample[i][1..].iter().copied())
    }

    /// Mean over samples of the per-sample foreground mean.
    pub fn mean_foreground(&self) -> f64 {
        mean((0..self.count()).map(|i| self.sample_foreground(i)))
    }

    pub fn foreground_std(&self) -> f64 {
        std((0..self.count()).map(|i| self.sample_foreground(i)))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn std(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = mean(it.clone());
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + (v - m).powi(2), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

/// Scores an arbitrary per-sample label predictor.
pub fn evaluate_with(
    dataset: &Dataset,
    domain: &str,
    stage: Stage,
    mut predict: impl FnMut(usize) -> Result<Vec<u8>>,
) -> Result<DomainReport> {
    let classes = dataset.manifest.classes;
    let mut per_sample = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let pred = predict(i)?;
        let d = (0..classes)
            .map(|c| dice(&pred, &s.labels, c as u8))
            .collect::<Result<Vec<_>>>()?;
        per_sample.push(d);
    }
    Ok(DomainReport {
        domain: domain.to_owned(),
        stage,
        classes,
        per_sample,
    })
}

/// As [`evaluate`], with the shape-correction step supplied by the caller.
pub fn evaluate_staged(
    bundle: &ModelBundle,
    dataset: &Dataset,
    domain: &str,
    stage: Stage,
    correct: impl Fn(&SegProb) -> Result<SegProb>,
) -> Result<DomainReport> {
    check_compatible(bundle, dataset)?;
    evaluate_with(dataset, domain, stage, |i| {
        let p = bundle.ftn_predict(&dataset.samples[i].image)?;
        let p = match stage {
            Stage::Ftn => p,
            Stage::FtnStn => correct(&p)?,
        };
        Ok(p.labels())
    })
}

/// Per-class Dice of `argmax ftn_predict` or `argmax full_predict` per sample.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset, domain: &str, stage: Stage) -> Result<DomainReport> {
    evaluate_staged(bundle, dataset, domain, stage, |p| bundle.shape_correct(p))
}

fn check_compatible(bundle: &ModelBundle, dataset: &Dataset) -> Result<()> {
    let (c, m) = (bundle.config(), &dataset.manifest);
    for (axis, want, got) in [("height", c.height, m.height), ("width", c.width, m.width), ("classes", c.classes, m.classes)] {
        if want != got {
            return Err(Error::dim("evaluate", axis, want, got));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
