//! Central-difference gradient oracle.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ReLU input changes sign or a pooling
    /// argmax moves within `eps` of them.
    pub excluded: Vec<usize>,
    /// Coordinate attaining `max_rel_err`.
    pub worst: Option<usize>,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `‖a - b‖₂ / ‖b‖₂` over the coordinates not listed in `skip`; 0 when
/// `b` vanishes there.
pub fn norm_rel_err(a: &Tensor, b: &Tensor, skip: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if skip.contains(&i) {
            continue;
        }
        num += (x as f64 - y as f64).powi(2);
        den += (y as f64).powi(2);
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// `f` receives a fresh graph and the leaf holding the (perturbed) point and
/// must return a scalar loss node. It is evaluated twice at `point` first; any
/// bitwise disagreement is reported as an oracle error.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<(f64, Vec<u32>)> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false);
        let loss = f(&mut g, x)?;
        Ok((g.scalar_f64(loss), g.kink_pattern()))
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let loss = f(&mut g, x)?;
    let f0 = g.scalar_f64(loss);
    let analytic = match g.backward(loss, &[])?.take(x) {
        Some(t) => t,
        None => Tensor::zeros(point.shape()),
    };
    let (f0_again, pattern) = eval(point)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {f0} then {f0_again}"
        )));
    }

    let mut numeric = vec![0.0f32; point.numel()];
    let mut excluded = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        let (xp, xm) = (x0 + eps, x0 - eps);
        probe.data_mut()[i] = xp;
        let (fp, pat_p) = eval(&probe)?;
        probe.data_mut()[i] = xm;
        let (fm, pat_m) = eval(&probe)?;
        probe.data_mut()[i] = x0;

        let (dp, dm) = ((xp - x0) as f64, (x0 - xm) as f64);
        let central = (fp - fm) / (dp + dm);
        numeric[i] = central as f32;
        if pat_p != pattern || pat_m != pattern {
            excluded.push(i);
            continue;
        }
        let e = rel_err(analytic.data()[i] as f64, central);
        if e > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(e);
            worst = Some(i);
        }
    }
    let checked = point.numel() - excluded.len();
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        checked,
        excluded,
        worst,
        analytic,
        numeric: Tensor::new(point.shape(), numeric)?,
    })
}
