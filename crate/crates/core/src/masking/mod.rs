//! Latent-space masks and the hard-example generator.
//!
//! Masks have the shape of the latent code they are applied to and are
//! combined with it elementwise. Dropout masks zero whole channels at random;
//! the targeted masks attenuate the channels or positions whose loss gradient
//! has the largest mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::networks::{ArchConfig, ModelBundle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    Dropout,
    Channel,
    Spatial,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 3] = [MaskScheme::Dropout, MaskScheme::Channel, MaskScheme::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            MaskScheme::Dropout => "dropout",
            MaskScheme::Channel => "channel",
            MaskScheme::Spatial => "spatial",
        }
    }
}

impl std::str::FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskScheme::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown mask scheme {s:?}")))
    }
}

/// How gradient entries are summarised before ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMean {
    /// Signed mean.
    #[default]
    Raw,
    /// Mean of absolute values.
    Abs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Masking ratio is drawn uniformly from `[lo, hi]` once per sample.
    pub p_range: (f64, f64),
    /// Attenuation value is drawn uniformly from `[lo, hi)` per mask.
    pub a_range: (f64, f64),
    pub grad_mean: GradMean,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p_range: (0.0, 0.5),
            a_range: (0.0, 0.5),
            grad_mean: GradMean::Raw,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (plo, phi) = self.p_range;
        if !(0.0..=1.0).contains(&plo) || !(plo..=1.0).contains(&phi) {
            return Err(Error::contract(format!("p_range {:?} must lie in [0,1]", self.p_range)));
        }
        let (alo, ahi) = self.a_range;
        if !(0.0..=1.0).contains(&alo) || !(alo..=1.0).contains(&ahi) {
            return Err(Error::contract(format!("a_range {:?} must lie in [0,1]", self.a_range)));
        }
        Ok(())
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("mask ratio {p} outside [0,1]")));
    }
    Ok(())
}

fn check_attenuation(a: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::contract(format!("attenuation {a} outside [0,1]")));
    }
    Ok(())
}

/// `⌈p·n⌉`, treating products within 1e-9 of an integer as that integer.
pub fn masked_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Each channel is all zeros with probability `p`, otherwise all ones.
pub fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize, usize), p: f64) -> Result<Tensor> {
    check_ratio(p)?;
    let (c, h, w) = shape;
    let hw = h * w;
    let mut m = Tensor::ones(&[c, h, w]);
    for k in 0..c {
        if rng.gen_bool(p) {
            m.data_mut()[k * hw..(k + 1) * hw].fill(0.0);
        }
    }
    Ok(m)
}

/// Indices of the `k` largest scores; stable, so ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx
}

fn summarise(v: f32, mode: GradMean) -> f64 {
    match mode {
        GradMean::Raw => v as f64,
        GradMean::Abs => v.abs() as f64,
    }
}

/// Per-channel mean of a `[C,H,W]` gradient.
pub fn channel_means(grad: &Tensor, mode: GradMean) -> Result<Vec<f64>> {
    let (_, h, w) = grad.chw("channel_means")?;
    let hw = h * w;
    Ok(grad
        .data()
        .chunks_exact(hw)
        .map(|ch| ch.iter().map(|&v| summarise(v, mode)).sum::<f64>() / hw as f64)
        .collect())
}

/// Per-position mean across channels of a `[C,H,W]` gradient, row-major.
pub fn spatial_means(grad: &Tensor, mode: GradMean) -> Result<Vec<f64>> {
    let (c, h, w) = grad.chw("spatial_means")?;
    let hw = h * w;
    let mut acc = vec![0.0f64; hw];
    for ch in grad.data().chunks_exact(hw) {
        for (s, &v) in acc.iter_mut().zip(ch) {
            *s += summarise(v, mode);
        }
    }
    for s in &mut acc {
        *s /= c as f64;
    }
    Ok(acc)
}

/// Sets the `⌈p·C⌉` channels with the largest mean gradient to `a`, the rest to 1.
pub fn channel_targeted_mask(grad: &Tensor, p: f64, a: f32, mode: GradMean) -> Result<Tensor> {
    check_ratio(p)?;
    check_attenuation(a)?;
    let (c, h, w) = grad.chw("channel_targeted_mask")?;
    let hw = h * w;
    let means = channel_means(grad, mode)?;
    let mut m = Tensor::ones(&[c, h, w]);
    for k in top_k(&means, masked_count(p, c)) {
        m.data_mut()[k * hw..(k + 1) * hw].fill(a);
    }
    Ok(m)
}

/// Sets every channel at the `⌈p·H·W⌉` positions with the largest mean
/// gradient to `a`, the rest to 1.
pub fn spatial_targeted_mask(grad: &Tensor, p: f64, a: f32, mode: GradMean) -> Result<Tensor> {
    check_ratio(p)?;
    check_attenuation(a)?;
    let (c, h, w) = grad.chw("spatial_targeted_mask")?;
    let hw = h * w;
    let means = spatial_means(grad, mode)?;
    let mut m = Tensor::ones(&[c, h, w]);
    for pos in top_k(&means, masked_count(p, hw)) {
        for k in 0..c {
            m.data_mut()[k * hw + pos] = a;
        }
    }
    Ok(m)
}

pub fn apply_mask(z: &Tensor, mask: &Tensor) -> Result<Tensor> {
    z.zip_map(mask, |v, m| v * m)
}

/// A masked reconstruction and segmentation, both detached from any graph.
#[derive(Clone, Debug)]
pub struct HardExample {
    pub scheme: MaskScheme,
    pub p: f64,
    /// Attenuation used for the image and shape masks; 0 for dropout.
    pub a: (f32, f32),
    pub mask_image: Tensor,
    pub mask_shape: Tensor,
    /// `D_i(z_i ⊙ m_i)`, `[1,H,W]`.
    pub x_hat: Tensor,
    /// `D_s(z_s ⊙ m_s)`, `[C,H,W]`.
    pub p_hat: Tensor,
}

/// Latent codes and the gradients of the two decoder losses with respect to them.
pub struct LatentGradients {
    pub z_i: Tensor,
    pub z_s: Tensor,
    /// `∂ MSE(D_i(z_i), x) / ∂ z_i`.
    pub g_zi: Tensor,
    /// `∂ CE(D_s(z_s), y) / ∂ z_s`.
    pub g_zs: Tensor,
}

fn check_pair(cfg: &ArchConfig, x: &Tensor, y: &Tensor) -> Result<()> {
    x.expect_shape("hard example image", &[1, cfg.height, cfg.width])?;
    y.expect_shape("hard example labels", &[cfg.classes, cfg.height, cfg.width])
}

/// Forward pass plus two separate backward passes, one per decoder loss.
pub fn latent_gradients(model: &ModelBundle, x: &Tensor, y: &Tensor) -> Result<LatentGradients> {
    check_pair(model.config(), x, y)?;
    let mut g = Graph::new();
    let m = model.bind(&mut g, false);
    let xi = g.leaf(x.clone(), false);
    let yi = g.leaf(y.clone(), false);
    let z_i = m.encode(&mut g, xi)?;
    let z_s = m.decouple(&mut g, z_i)?;
    let rec = m.decode_image(&mut g, z_i)?;
    let rec_loss = g.mse(rec, xi)?;
    let seg = m.decode_seg(&mut g, z_s)?;
    let seg_loss = g.cross_entropy(seg, yi)?;
    let mut gi = g.backward(rec_loss, &[z_i])?;
    let mut gs = g.backward(seg_loss, &[z_s])?;
    let zero = |t: &Tensor| Tensor::zeros(t.shape());
    Ok(LatentGradients {
        g_zi: gi.take(z_i).unwrap_or_else(|| zero(g.value(z_i))),
        g_zs: gs.take(z_s).unwrap_or_else(|| zero(g.value(z_s))),
        z_i: g.value(z_i).clone(),
        z_s: g.value(z_s).clone(),
    })
}

/// Builds one hard example from `(x, y)` with the model's current weights.
///
/// The scheme is uniform over the three kinds and `p` is shared by both
/// latent codes; each targeted mask draws its own attenuation.
pub fn generate_hard_example(
    model: &ModelBundle,
    x: &Tensor,
    y: &Tensor,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<HardExample> {
    cfg.validate()?;
    let scheme = MaskScheme::ALL[rng.gen_range(0..3)];
    let p = uniform(rng, cfg.p_range, true);
    generate_with(model, x, y, scheme, p, cfg, rng)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64), closed: bool) -> f64 {
    if hi <= lo {
        lo
    } else if closed {
        rng.gen_range(lo..=hi)
    } else {
        rng.gen_range(lo..hi)
    }
}

/// As [`generate_hard_example`] with the scheme and ratio fixed.
pub fn generate_with(
    model: &ModelBundle,
    x: &Tensor,
    y: &Tensor,
    scheme: MaskScheme,
    p: f64,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<HardExample> {
    check_ratio(p)?;
    let (c, h, w) = model.config().latent_dims();
    let (z_i, z_s, mask_image, mask_shape, a) = match scheme {
        MaskScheme::Dropout => {
            check_pair(model.config(), x, y)?;
            let z_i = model.encode(x)?;
            let z_s = model.decouple(&z_i)?;
            let mi = dropout_mask(rng, (c, h, w), p)?;
            let ms = dropout_mask(rng, (c, h, w), p)?;
            (z_i.tensor, z_s.tensor, mi, ms, (0.0, 0.0))
        }
        MaskScheme::Channel | MaskScheme::Spatial => {
            let lg = latent_gradients(model, x, y)?;
            let ai = uniform(rng, cfg.a_range, false) as f32;
            let as_ = uniform(rng, cfg.a_range, false) as f32;
            let gen = if scheme == MaskScheme::Channel {
                channel_targeted_mask
            } else {
                spatial_targeted_mask
            };
            let mi = gen(&lg.g_zi, p, ai, cfg.grad_mean)?;
            let ms = gen(&lg.g_zs, p, as_, cfg.grad_mean)?;
            (lg.z_i, lg.z_s, mi, ms, (ai, as_))
        }
    };
    let zi_hat = apply_mask(&z_i, &mask_image)?;
    let zs_hat = apply_mask(&z_s, &mask_shape)?;
    let mut g = Graph::new();
    let m = model.bind(&mut g, false);
    let zi = g.leaf(zi_hat, false);
    let zs = g.leaf(zs_hat, false);
    let xh = m.decode_image(&mut g, zi)?;
    let ph = m.decode_seg(&mut g, zs)?;
    Ok(HardExample {
        scheme,
        p,
        a,
        mask_image,
        mask_shape,
        x_hat: g.value(xh).clone(),
        p_hat: g.value(ph).clone(),
    })
}
