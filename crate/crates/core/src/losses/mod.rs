//! Loss primitives and the standard, hard-example and cooperative objectives.
//!
//! Shape losses are cross-entropies between the shape-correction output and
//! the ground truth. Batch values are arithmetic means of per-sample values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, CE_EPS};
use crate::error::{Error, Result};
use crate::masking::HardExample;
use crate::networks::{BoundModel, ModelBundle};
use crate::tensor::Tensor;

/// Names of the loss components in reporting order. The first four make up
/// the standard objective, the last four the hard-example objective.
pub const COMPONENTS: [&str; 8] = [
    "rec",
    "seg",
    "shp_p_prime",
    "shp_y_prime",
    "hard_rec",
    "hard_seg",
    "hard_shp_p_hat",
    "hard_shp_p_bar",
];

pub const STANDARD_TERMS: usize = 4;

/// Mean of squared differences.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    target.expect_shape("mse", pred.shape())?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Pixel-mean of `-Σ_c y_c ln(p_c + 1e-8)` for `[C,H,W]` maps.
pub fn cross_entropy(prob: &Tensor, target: &Tensor) -> Result<f64> {
    let (_, h, w) = prob.chw("cross_entropy")?;
    target.expect_shape("cross_entropy", prob.shape())?;
    let s: f64 = prob
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -(y as f64) * ((p + CE_EPS) as f64).ln())
        .sum();
    Ok(s / (h * w) as f64)
}

/// Per-component multipliers, all 1 by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 8]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0; 8])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// `Σ w_k · component_k`.
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// Concatenates two reports, summing their totals.
    pub fn concat(&self, other: &LossReport) -> LossReport {
        LossReport {
            total: self.total + other.total,
            components: self.components.iter().chain(&other.components).copied().collect(),
        }
    }
}

/// One training pair: image `[1,H,W]` and one-hot labels `[C,H,W]`.
#[derive(Clone, Debug)]
pub struct Pair {
    pub x: Tensor,
    pub y: Tensor,
}

/// The four standard terms of one sample, recorded on `g`.
pub fn standard_terms(g: &mut Graph, m: &BoundModel<'_>, x: NodeId, y: NodeId) -> Result<[NodeId; 4]> {
    let z_i = m.encode(g, x)?;
    let x_rec = m.decode_image(g, z_i)?;
    let rec = g.mse(x_rec, x)?;
    let z_s = m.decouple(g, z_i)?;
    let p = m.decode_seg(g, z_s)?;
    let seg = g.cross_entropy(p, y)?;
    let p_prime = m.shape_correct(g, p)?;
    let shp_p = g.cross_entropy(p_prime, y)?;
    let y_prime = m.shape_correct(g, y)?;
    let shp_y = g.cross_entropy(y_prime, y)?;
    Ok([rec, seg, shp_p, shp_y])
}

/// The four hard-example terms of one sample. `x_hat` and `p_hat` are
/// constants on `g`; targets are the clean `x` and `y`.
pub fn hard_terms(
    g: &mut Graph,
    m: &BoundModel<'_>,
    x: NodeId,
    y: NodeId,
    x_hat: NodeId,
    p_hat: NodeId,
) -> Result<[NodeId; 4]> {
    let z_i = m.encode(g, x_hat)?;
    let x_rec = m.decode_image(g, z_i)?;
    let rec = g.mse(x_rec, x)?;
    let z_s = m.decouple(g, z_i)?;
    let p_bar = m.decode_seg(g, z_s)?;
    let seg = g.cross_entropy(p_bar, y)?;
    let c_hat = m.shape_correct(g, p_hat)?;
    let shp_hat = g.cross_entropy(c_hat, y)?;
    let c_bar = m.shape_correct(g, p_bar)?;
    let shp_bar = g.cross_entropy(c_bar, y)?;
    Ok([rec, seg, shp_hat, shp_bar])
}

/// Weighted sum of `terms`, whose weights start at `COMPONENTS[offset]`.
fn weighted_total(g: &mut Graph, terms: &[NodeId], weights: &LossWeights, offset: usize) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (k, &t) in terms.iter().enumerate() {
        let w = weights.0[offset + k];
        let term = if w == 1.0 { t } else { g.scale(t, w as f32) };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::contract("no loss terms"))
}

/// All loss nodes for one sample.
pub struct SampleGraph {
    pub graph: Graph,
    pub terms: Vec<NodeId>,
    pub total: NodeId,
    pub params: Vec<NodeId>,
}

/// Records the standard objective, plus the hard objective when `hard` is
/// given, for one sample on a fresh graph with trainable parameters.
pub fn sample_graph(
    model: &ModelBundle,
    pair: &Pair,
    hard: Option<&HardExample>,
    weights: &LossWeights,
) -> Result<SampleGraph> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, true);
    let params = (0..model.params().len()).map(|i| m.param_node(i)).collect();
    let x = g.leaf(pair.x.clone(), false);
    let y = g.leaf(pair.y.clone(), false);
    let mut terms = standard_terms(&mut g, &m, x, y)?.to_vec();
    if let Some(h) = hard {
        let xh = g.leaf(h.x_hat.clone(), false);
        let ph = g.leaf(h.p_hat.clone(), false);
        terms.extend(hard_terms(&mut g, &m, x, y, xh, ph)?);
    }
    let total = weighted_total(&mut g, &terms, weights, 0)?;
    Ok(SampleGraph {
        graph: g,
        terms,
        total,
        params,
    })
}

/// Batch-mean loss report and parameter gradients.
///
/// `grads[i]` is `None` when no sample's loss depends on parameter `i`.
pub struct BatchGradients {
    pub report: LossReport,
    pub grads: Vec<Option<Tensor>>,
}

/// Mean objective over `pairs`. Cooperative when `hard` is given (one hard
/// example per pair), standard otherwise. Per-sample gradients are reduced
/// in sample order.
pub fn batch_gradients(
    model: &ModelBundle,
    pairs: &[Pair],
    hard: Option<&[HardExample]>,
    weights: &LossWeights,
) -> Result<BatchGradients> {
    if pairs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Some(h) = hard {
        if h.len() != pairs.len() {
            return Err(Error::dim("batch_gradients", "hard examples", pairs.len(), h.len()));
        }
    }
    let n_terms = if hard.is_some() { 8 } else { STANDARD_TERMS };
    let mut sums = vec![0.0f64; n_terms];
    let mut total = 0.0f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (i, pair) in pairs.iter().enumerate() {
        let sg = sample_graph(model, pair, hard.map(|h| &h[i]), weights)?;
        for (s, &t) in sums.iter_mut().zip(&sg.terms) {
            *s += sg.graph.scalar_f64(t);
        }
        total += sg.graph.scalar_f64(sg.total);
        let mut gm = sg.graph.backward(sg.total, &[])?;
        for (slot, &node) in grads.iter_mut().zip(&sg.params) {
            if let Some(gr) = gm.take(node) {
                match slot {
                    None => *slot = Some(gr),
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    let n = pairs.len() as f64;
    let inv = (1.0 / n) as f32;
    for t in grads.iter_mut().flatten() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    Ok(BatchGradients {
        report: LossReport {
            total: total / n,
            components: COMPONENTS.iter().copied().zip(sums.into_iter().map(|s| s / n)).collect(),
        },
        grads,
    })
}

fn report_of(model: &ModelBundle, pairs: &[Pair], hard: Option<&[HardExample]>, offset: usize, weights: &LossWeights) -> Result<LossReport> {
    if pairs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut sums = [0.0f64; 4];
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let mut g = Graph::new();
        let m = model.bind(&mut g, false);
        let x = g.leaf(pair.x.clone(), false);
        let y = g.leaf(pair.y.clone(), false);
        let terms = match hard {
            None => standard_terms(&mut g, &m, x, y)?,
            Some(h) => {
                let xh = g.leaf(h[i].x_hat.clone(), false);
                let ph = g.leaf(h[i].p_hat.clone(), false);
                hard_terms(&mut g, &m, x, y, xh, ph)?
            }
        };
        let t = weighted_total(&mut g, &terms, weights, offset)?;
        total += g.scalar_f64(t);
        for (s, &t) in sums.iter_mut().zip(&terms) {
            *s += g.scalar_f64(t);
        }
    }
    let n = pairs.len() as f64;
    Ok(LossReport {
        total: total / n,
        components: COMPONENTS[offset..offset + 4]
            .iter()
            .copied()
            .zip(sums.iter().map(|s| s / n))
            .collect(),
    })
}

pub fn standard_loss(model: &ModelBundle, pairs: &[Pair], weights: &LossWeights) -> Result<LossReport> {
    report_of(model, pairs, None, 0, weights)
}

pub fn hard_loss(model: &ModelBundle, pairs: &[Pair], hard: &[HardExample], weights: &LossWeights) -> Result<LossReport> {
    if hard.len() != pairs.len() {
        return Err(Error::dim("hard_loss", "hard examples", pairs.len(), hard.len()));
    }
    report_of(model, pairs, Some(hard), STANDARD_TERMS, weights)
}

pub fn cooperative_loss(model: &ModelBundle, pairs: &[Pair], hard: &[HardExample], weights: &LossWeights) -> Result<LossReport> {
    Ok(standard_loss(model, pairs, weights)?.concat(&hard_loss(model, pairs, hard, weights)?))
}

#[cfg(test)]
mod tests;
