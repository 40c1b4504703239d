use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(bundle: &ModelBundle) -> Self {
        let zeros: Vec<Tensor> = bundle.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Every parameter needs a gradient; nothing is modified if one is missing.
pub fn adam_step(bundle: &mut ModelBundle, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let n = bundle.params().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::dim("adam_step", "parameters", n, grads.len()));
    }
    for (p, g) in bundle.params().iter().zip(grads) {
        match g {
            None => return Err(Error::contract(format!("missing gradient for parameter {}", p.name))),
            Some(g) => g.expect_shape("adam_step", p.tensor.shape())?,
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let step = (cfg.lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = cfg.eps as f32;
    for (i, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("checked above");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = bundle.param_mut(i).data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            w[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
