use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_GEOMETRY_ATTEMPTS: usize = 100;

/// Intensity and noise ranges of the phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    /// Per-class `[lo, hi)` intensity ranges: background, cavity, wall, RV.
    pub intensity: [(f32, f32); 4],
    pub noise_sigma: f32,
}

impl PhantomStyle {
    pub fn standard() -> Self {
        PhantomStyle {
            intensity: [(0.05, 0.2), (0.75, 0.95), (0.3, 0.45), (0.55, 0.7)],
            noise_sigma: 0.02,
        }
    }

    /// Different scanner: brighter background, compressed contrast, more noise.
    pub fn shifted() -> Self {
        PhantomStyle {
            intensity: [(0.15, 0.3), (0.65, 0.85), (0.35, 0.5), (0.5, 0.65)],
            noise_sigma: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.ra).powi(2) + (v / self.rb).powi(2) <= 1.0
    }

    /// Stays at least one pixel away from every edge.
    fn inside_canvas(&self, h: usize, w: usize) -> bool {
        let (s, c) = self.angle.sin_cos();
        let ex = ((self.ra * c).powi(2) + (self.rb * s).powi(2)).sqrt();
        let ey = ((self.ra * s).powi(2) + (self.rb * c).powi(2)).sqrt();
        self.cx - ex >= 1.0 && self.cx + ex <= w as f64 - 2.0 && self.cy - ey >= 1.0 && self.cy + ey <= h as f64 - 2.0
    }
}

struct Geometry {
    cavity: Ellipse,
    wall: Ellipse,
    rv: Ellipse,
}

fn draw_geometry(rng: &mut impl Rng, h: usize, w: usize) -> Geometry {
    let s = h.min(w) as f64;
    let cx = rng.gen_range(0.42..0.58) * w as f64;
    let cy = rng.gen_range(0.42..0.58) * h as f64;
    let angle = rng.gen_range(0.0..PI);
    let ra = rng.gen_range(0.12..0.17) * s;
    let rb = rng.gen_range(0.1..0.15) * s;
    let thick = rng.gen_range(0.06..0.09) * s;
    let cavity = Ellipse { cx, cy, ra, rb, angle };
    let wall = Ellipse {
        ra: ra + thick,
        rb: rb + thick,
        ..cavity
    };
    let dir = PI + rng.gen_range(-0.6..0.6);
    let rv_a = rng.gen_range(0.16..0.22) * s;
    let rv_b = rng.gen_range(0.1..0.14) * s;
    let dist = wall.ra.max(wall.rb) * rng.gen_range(0.7..1.0);
    let rv = Ellipse {
        cx: cx + dist * dir.cos(),
        cy: cy + dist * dir.sin(),
        ra: rv_a,
        rb: rv_b,
        angle: dir + PI / 2.0,
    };
    Geometry { cavity, wall, rv }
}

/// One phantom image `[1,H,W]` in `[0,1]` and its row-major label map.
pub fn phantom(rng: &mut impl Rng, h: usize, w: usize, style: &PhantomStyle) -> Result<(Tensor, Vec<u8>)> {
    let mut geo = None;
    for _ in 0..MAX_GEOMETRY_ATTEMPTS {
        let g = draw_geometry(rng, h, w);
        if g.wall.inside_canvas(h, w) && g.rv.inside_canvas(h, w) {
            geo = Some(g);
            break;
        }
    }
    let geo = geo.ok_or(Error::Geometry(MAX_GEOMETRY_ATTEMPTS))?;
    let level: Vec<f32> = style
        .intensity
        .iter()
        .map(|&(lo, hi)| rng.gen_range(lo..hi))
        .collect();
    let noise = Normal::new(0.0f32, style.noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut labels = vec![0u8; h * w];
    let mut img = Tensor::zeros(&[1, h, w]);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let l = if geo.cavity.contains(x, y) {
                1
            } else if geo.wall.contains(x, y) {
                2
            } else if geo.rv.contains(x, y) {
                3
            } else {
                0
            };
            labels[r * w + c] = l;
            img.data_mut()[r * w + c] = (level[l as usize] + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok((img, labels))
}
