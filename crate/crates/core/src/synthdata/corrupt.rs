use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Bias,
    Ghost,
    Motion,
    Spike,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [Corruption::Bias, Corruption::Ghost, Corruption::Motion, Corruption::Spike];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Bias => "bias",
            Corruption::Ghost => "ghost",
            Corruption::Motion => "motion",
            Corruption::Spike => "spike",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8 + 1
    }

    pub(crate) fn from_code(c: u8) -> Option<Option<Corruption>> {
        match c {
            0 => Some(None),
            1..=4 => Some(Some(Corruption::ALL[c as usize - 1])),
            _ => None,
        }
    }

    /// Applies this corruption; labels are untouched by construction.
    pub fn apply(self, x: &Tensor, severity: f32, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            Corruption::Bias => corrupt_bias(x, severity, rng),
            Corruption::Ghost => corrupt_ghost(x, severity, rng),
            Corruption::Motion => corrupt_motion(x, severity, rng),
            Corruption::Spike => corrupt_spike(x, severity, rng),
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown corruption {s:?}")))
    }
}

/// Log-gain of the bias field at severity 1.
pub const BIAS_GAIN: f32 = 3.5;
/// Sinusoid amplitude at severity 1.
pub const SPIKE_GAIN: f32 = 1.5;

fn check_severity(s: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::contract(format!("severity {s} outside [0,1]")));
    }
    Ok(())
}

fn clamp01(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

/// Circular shift of a `[1,H,W]` image by `(dy, dx)`.
fn roll(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..h {
        let sr = (r as isize - dy).rem_euclid(h as isize) as usize;
        for c in 0..w {
            let sc = (c as isize - dx).rem_euclid(w as isize) as usize;
            out.data_mut()[r * w + c] = x.data()[sr * w + sc];
        }
    }
    out
}

/// Multiplies by `exp(3.5·s·(2t-1))`, where `t` is a smooth quadratic field rescaled to `[0, 1]`.
pub fn corrupt_bias(x: &Tensor, severity: f32, rng: &mut impl Rng) -> Result<Tensor> {
    check_severity(severity)?;
    let (_, h, w) = x.chw("corrupt_bias")?;
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let k: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let field: Vec<f32> = (0..h * w)
        .map(|i| {
            let u = 2.0 * (i % w) as f32 / (w.max(2) - 1) as f32 - 1.0;
            let v = 2.0 * (i / w) as f32 / (h.max(2) - 1) as f32 - 1.0;
            k[0] + k[1] * u + k[2] * v + k[3] * u * u + k[4] * u * v + k[5] * v * v
        })
        .collect();
    let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let out = Tensor::from_fn(x.shape(), |i| {
        let t = if span > 0.0 { (field[i] - lo) / span } else { 0.5 };
        x.data()[i] * (BIAS_GAIN * severity * (2.0 * t - 1.0)).exp()
    });
    Ok(clamp01(out))
}

/// Adds a circularly shifted copy scaled by `0.5·s`.
pub fn corrupt_ghost(x: &Tensor, severity: f32, rng: &mut impl Rng) -> Result<Tensor> {
    check_severity(severity)?;
    let (_, h, w) = x.chw("corrupt_ghost")?;
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let vertical = rng.gen_bool(0.5);
    let n = if vertical { h } else { w };
    let shift = rng.gen_range((n / 4).max(1)..=(n / 2).max(1)) as isize;
    let copy = if vertical { roll(x, shift, 0) } else { roll(x, 0, shift) };
    let out = x.zip_map(&copy, |a, b| a + 0.5 * severity * b)?;
    Ok(clamp01(out))
}

/// Averages the image with up to three copies shifted by at most `⌈6·s⌉` pixels.
pub fn corrupt_motion(x: &Tensor, severity: f32, rng: &mut impl Rng) -> Result<Tensor> {
    check_severity(severity)?;
    x.chw("corrupt_motion")?;
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let reach = (6.0 * severity).ceil() as isize;
    let copies = rng.gen_range(1..=3);
    let mut acc = x.clone();
    for _ in 0..copies {
        let (dy, dx) = loop {
            let d = (rng.gen_range(-reach..=reach), rng.gen_range(-reach..=reach));
            if d != (0, 0) {
                break d;
            }
        };
        let s = roll(x, dy, dx);
        for (a, b) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / (copies + 1) as f32;
    Ok(clamp01(acc.map(|v| v * inv)))
}

/// Adds a 2-D sinusoid of random frequency and phase with amplitude `1.5·s`.
pub fn corrupt_spike(x: &Tensor, severity: f32, rng: &mut impl Rng) -> Result<Tensor> {
    check_severity(severity)?;
    let (_, h, w) = x.chw("corrupt_spike")?;
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let fx = rng.gen_range(2.0..8.0f32);
    let fy = rng.gen_range(2.0..8.0f32);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = SPIKE_GAIN * severity;
    let out = Tensor::from_fn(x.shape(), |i| {
        let u = (i % w) as f32 / w as f32;
        let v = (i / w) as f32 / h as f32;
        x.data()[i] + amp * (2.0 * PI * (fx * u + fy * v) + phase).sin()
    });
    Ok(clamp01(out))
}
