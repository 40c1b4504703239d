use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation, kept independent of the im2col path.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o] as f64;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                            acc += xv as f64 * wv as f64;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc as f32;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

#[test]
fn conv_scalar_product() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 1, 1], vec![2.0]).unwrap(), false);
    let w = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap(), false);
    let b = g.leaf(Tensor::zeros(&[1]), false);
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let input = Tensor::from_fn(&[1, 3, 3], |i| i as f32 * 0.5 - 1.0);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = g.leaf(input.clone(), false);
    let w = g.leaf(Tensor::new(&[1, 1, 3, 3], k).unwrap(), false);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let b = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let wi = g.leaf(w.clone(), false);
        let bi = g.leaf(Tensor::new(&[2], b.clone()).unwrap(), false);
        let y = g.conv2d(xi, wi, Some(bi), 1, 1).unwrap();
        let expect = conv_oracle(&x, &w, &b, 1, 1);
        assert_eq!(g.value(y).shape(), expect.shape());
        for (a, e) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
    }
}

#[test]
fn conv_strided_and_multichannel_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 7, 5]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = vec![0.1, -0.2, 0.3, 0.0];
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let wi = g.leaf(w.clone(), false);
    let bi = g.leaf(Tensor::new(&[4], b.clone()).unwrap(), false);
    let y = g.conv2d(xi, wi, Some(bi), 2, 1).unwrap();
    let expect = conv_oracle(&x, &w, &b, 2, 1);
    assert_eq!(g.value(y).shape(), &[4, 4, 3]);
    for (a, e) in g.value(y).data().iter().zip(expect.data()) {
        assert!((a - e).abs() <= 1e-5);
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 4, 4]), false);
    let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("weight.in_channels"), "{err}");

    let w = g.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
    let err = g.conv2d(x, w, None, 2, 1).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");

    let w = g.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Dimension { .. }) | Err(Error::Contract(_))));
}

#[test]
fn backward_of_linear_sum() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let l = g.sum(x);
    let grads = g.backward(l, &[]).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l, &[]).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]), true);
    assert!(matches!(g.backward(x, &[]), Err(Error::Contract(_))));
}

#[test]
fn disconnected_nodes_are_absent() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::ones(&[2]), true);
    let b = g.leaf(Tensor::ones(&[2]), true);
    let unrelated = g.scale(b, 3.0);
    let l = g.sum(a);
    let grads = g.backward(l, &[unrelated]).unwrap();
    assert!(grads.contains(a));
    assert!(!grads.contains(b));
    assert!(!grads.contains(unrelated));
    assert_eq!(grads.len(), 1);
}

#[test]
fn marked_interior_node_receives_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), false);
    let z = g.scale(x, 2.0);
    let sq = g.mul(z, z).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l, &[z]).unwrap();
    assert_eq!(grads.get(z).unwrap().data(), &[4.0, -8.0]);
    assert!(!grads.contains(x));
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let r = g.relu(x);
    let l = g.sum(r);
    let grads = g.backward(l, &[]).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn conv_parameter_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        // Positive draws keep every gradient coordinate clear of cancellation,
        // where single-precision differences carry no information at 1e-2.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.0));
        let x = pos(&[2, 5, 5]);
        let w = pos(&[3, 2, 3, 3]);
        let b = pos(&[3]);
        let r = pos(&[3, 5, 5]);
        let conv_loss = |which: usize| {
            let (x, w, b, r) = (x.clone(), w.clone(), b.clone(), r.clone());
            move |g: &mut Graph, p: NodeId| {
                let xi = if which == 0 { p } else { g.leaf(x.clone(), false) };
                let wi = if which == 1 { p } else { g.leaf(w.clone(), false) };
                let bi = if which == 2 { p } else { g.leaf(b.clone(), false) };
                let ri = g.leaf(r.clone(), false);
                let y = g.conv2d(xi, wi, Some(bi), 1, 1)?;
                let yr = g.mul(y, ri)?;
                Ok(g.sum(yr))
            }
        };
        for (which, point) in [(0, &x), (1, &w), (2, &b)] {
            let rep = grad_check(conv_loss(which), point, 1e-3, 1e-2).unwrap();
            let w = rep.worst.unwrap();
            assert!(
                rep.pass,
                "seed {seed} param {which}: {} a={} n={}",
                rep.max_rel_err,
                rep.analytic.data()[w],
                rep.numeric.data()[w]
            );
        }
    }
}

#[test]
fn grad_check_square() {
    let p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
    let rep = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &p,
        1e-3,
        1e-2,
    )
    .unwrap();
    assert!(rep.pass);
    assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
}

#[test]
fn grad_check_constant() {
    let p = Tensor::new(&[3], vec![0.3, 0.1, -4.0]).unwrap();
    let rep = grad_check(
        |g, _x| {
            let c = g.leaf(Tensor::scalar(2.5), false);
            Ok(g.sum(c))
        },
        &p,
        1e-3,
        1e-2,
    )
    .unwrap();
    assert!(rep.pass);
    assert!(rep.analytic.data().iter().all(|&v| v == 0.0));
    assert!(rep.numeric.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn grad_check_excludes_relu_kink() {
    let p = Tensor::new(&[3], vec![0.0, 0.5, -0.5]).unwrap();
    let rep = grad_check(
        |g, x| {
            let r = g.relu(x);
            Ok(g.sum(r))
        },
        &p,
        1e-3,
        1e-2,
    )
    .unwrap();
    assert_eq!(rep.excluded, vec![0]);
    assert_eq!(rep.checked, 2);
    assert!(rep.pass);
}

#[test]
fn grad_check_detects_nondeterminism() {
    let calls = Cell::new(0u32);
    let p = Tensor::ones(&[2]);
    let res = grad_check(
        |g, x| {
            calls.set(calls.get() + 1);
            let s = g.scale(x, calls.get() as f32);
            Ok(g.sum(s))
        },
        &p,
        1e-3,
        1e-2,
    );
    assert!(matches!(res, Err(Error::Oracle(_))));
}

#[test]
fn grad_check_mse_against_zero() {
    let p = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
    let rep = grad_check(
        |g, x| {
            let z = g.leaf(Tensor::zeros(&[4]), false);
            g.mse(x, z)
        },
        &p,
        1e-3,
        1e-2,
    )
    .unwrap();
    assert!(rep.pass);
    for (a, x) in rep.analytic.data().iter().zip(p.data()) {
        assert!((a - x / 2.0).abs() < 1e-6);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let wi = g.leaf(w.clone(), false);
        let y = g.conv2d(xi, wi, None, 1, 1).unwrap();
        let y = g.relu(y);
        let y = g.maxpool2(y).unwrap();
        let y = g.upsample2(y).unwrap();
        let s = g.softmax(y).unwrap();
        g.value(s).clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn softmax_and_cross_entropy_values() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[4, 2, 2]), false);
    let p = g.softmax(logits).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    let mut y = Tensor::zeros(&[4, 2, 2]);
    for px in 0..4 {
        y.data_mut()[(px % 4) * 4 + px] = 1.0;
    }
    let yi = g.leaf(y, false);
    let ce = g.cross_entropy(p, yi).unwrap();
    assert!((g.scalar(ce) - 4f32.ln()).abs() < 1e-5);
}

#[test]
fn relu_and_maxpool_propagate_nan() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 2, 2], vec![1.0, f32::NAN, -1.0, 0.5]).unwrap(), false);
    let r = g.relu(x);
    assert!(g.value(r).data()[1].is_nan());
    assert_eq!(g.value(r).data()[2], 0.0);
    let m = g.maxpool2(x).unwrap();
    assert!(g.value(m).data()[0].is_nan());
}

#[test]
fn norm_rel_err_skips_listed_coordinates() {
    let a = Tensor::new(&[3], vec![1.0, 2.0, 100.0]).unwrap();
    let b = Tensor::new(&[3], vec![1.0, 2.2, 0.0]).unwrap();
    let e = norm_rel_err(&a, &b, &[2]);
    assert!((e - 0.2 / 2.2f64.hypot(1.0)).abs() < 1e-6, "{e}");
    assert_eq!(norm_rel_err(&a, &a, &[]), 0.0);
}
