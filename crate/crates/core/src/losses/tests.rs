use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::masking::{generate_with, MaskConfig, MaskScheme};
use crate::networks::{ArchConfig, ParamGroup, SegProb};

fn pair(seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<u8> = (0..256).map(|_| rng.gen_range(0..4)).collect();
    Pair {
        x,
        y: SegProb::one_hot(&labels, 4, 16, 16).unwrap().0,
    }
}

fn model() -> ModelBundle {
    ModelBundle::new(ArchConfig::tiny(16), 12).unwrap()
}

fn hard_for(model: &ModelBundle, p: &Pair, seed: u64) -> HardExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(model, &p.x, &p.y, MaskScheme::Channel, 0.3, &MaskConfig::default(), &mut rng).unwrap()
}

#[test]
fn mse_examples() {
    let a = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
    let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    assert_eq!(mse(&a, &b).unwrap(), 2.0);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.5);
    assert!((mse(&shifted, &a).unwrap() - 0.25).abs() < 1e-12);
    assert!(matches!(mse(&a, &Tensor::zeros(&[3])), Err(Error::Dimension { .. })));
}

#[test]
fn cross_entropy_examples() {
    let y = SegProb::one_hot(&[0, 1, 2, 3], 4, 2, 2).unwrap().0;
    let uniform = Tensor::full(&[4, 2, 2], 0.25);
    assert!((cross_entropy(&uniform, &y).unwrap() - 4f64.ln()).abs() < 1e-6);
    assert!(cross_entropy(&y, &y).unwrap() <= 1e-7);
    let half = Tensor::from_fn(&[4, 2, 2], |i| {
        let (k, px) = (i / 4, i % 4);
        if k == px {
            0.5
        } else {
            0.5 / 3.0
        }
    });
    assert!((cross_entropy(&half, &y).unwrap() - 2f64.ln()).abs() < 1e-6);
    assert!(cross_entropy(&uniform, &Tensor::zeros(&[4, 2, 1])).is_err());
}

#[test]
fn graph_and_tensor_losses_agree() {
    let p = pair(1);
    let q = Tensor::from_fn(&[4, 16, 16], |i| if i % 3 == 0 { 0.7 } else { 0.1 });
    let mut g = Graph::new();
    let qn = g.leaf(q.clone(), false);
    let yn = g.leaf(p.y.clone(), false);
    let ce = g.cross_entropy(qn, yn).unwrap();
    assert!((g.scalar_f64(ce) - cross_entropy(&q, &p.y).unwrap()).abs() < 1e-12);
}

fn groups_reached(model: &ModelBundle, term: usize, hard: Option<&HardExample>, p: &Pair) -> BTreeSet<ParamGroup> {
    let sg = sample_graph(model, p, hard, &LossWeights::default()).unwrap();
    let gm = sg.graph.backward(sg.terms[term], &[]).unwrap();
    sg.params
        .iter()
        .zip(model.params())
        .filter(|(n, _)| gm.contains(**n))
        .map(|(_, p)| p.group)
        .collect()
}

#[test]
fn standard_total_reaches_every_group() {
    let m = model();
    let p = pair(2);
    let sg = sample_graph(&m, &p, None, &LossWeights::default()).unwrap();
    let gm = sg.graph.backward(sg.total, &[]).unwrap();
    for (node, param) in sg.params.iter().zip(m.params()) {
        assert!(gm.contains(*node), "{} has no gradient", param.name);
    }
}

#[test]
fn shape_loss_on_prediction_reaches_fast_network() {
    let m = model();
    let p = pair(3);
    let reached = groups_reached(&m, 2, None, &p);
    for g in [ParamGroup::Encoder, ParamGroup::Decoupler, ParamGroup::SegDecoder, ParamGroup::Stn] {
        assert!(reached.contains(&g), "{g:?}");
    }
    assert!(!reached.contains(&ParamGroup::ImageDecoder));
    // Every individual parameter of those groups gets an entry.
    let sg = sample_graph(&m, &p, None, &LossWeights::default()).unwrap();
    let gm = sg.graph.backward(sg.terms[2], &[]).unwrap();
    for (node, param) in sg.params.iter().zip(m.params()) {
        if param.group != ParamGroup::ImageDecoder {
            assert!(gm.contains(*node), "{}", param.name);
        }
    }
}

#[test]
fn shape_loss_on_labels_reaches_only_stn() {
    let m = model();
    let reached = groups_reached(&m, 3, None, &pair(4));
    assert_eq!(reached, BTreeSet::from([ParamGroup::Stn]));
}

#[test]
fn hard_examples_are_detached() {
    let m = model();
    let p = pair(5);
    let h = hard_for(&m, &p, 1);
    // C(p̂) only sees ψ: nothing flows back into the generation pass.
    assert_eq!(groups_reached(&m, 6, Some(&h), &p), BTreeSet::from([ParamGroup::Stn]));
    assert_eq!(
        groups_reached(&m, 4, Some(&h), &p),
        BTreeSet::from([ParamGroup::Encoder, ParamGroup::ImageDecoder])
    );
    assert_eq!(
        groups_reached(&m, 7, Some(&h), &p),
        BTreeSet::from([ParamGroup::Encoder, ParamGroup::Decoupler, ParamGroup::SegDecoder, ParamGroup::Stn])
    );
}

#[test]
fn reports_sum_and_compose() {
    let m = model();
    let pairs = vec![pair(6), pair(7), pair(8)];
    let hard: Vec<_> = pairs.iter().enumerate().map(|(i, p)| hard_for(&m, p, i as u64)).collect();
    let w = LossWeights::default();
    let std = standard_loss(&m, &pairs, &w).unwrap();
    let hl = hard_loss(&m, &pairs, &hard, &w).unwrap();
    let coop = cooperative_loss(&m, &pairs, &hard, &w).unwrap();
    assert_eq!(std.components.len(), 4);
    assert_eq!(coop.components.len(), 8);
    for r in [&std, &hl, &coop] {
        let s: f64 = r.components.iter().map(|c| c.1).sum();
        assert!((r.total - s).abs() < 1e-6);
        assert!(r.components.iter().all(|c| c.1 >= 0.0));
    }
    assert!((coop.total - (std.total + hl.total)).abs() < 1e-6);
    let names: Vec<_> = coop.components.iter().map(|c| c.0).collect();
    assert_eq!(names, COMPONENTS);

    let bg = batch_gradients(&m, &pairs, Some(&hard), &w).unwrap();
    assert!((bg.report.total - coop.total).abs() < 1e-9);
    for ((_, a), (_, b)) in bg.report.components.iter().zip(&coop.components) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn weights_scale_the_total() {
    let m = model();
    let pairs = vec![pair(9)];
    let mut w = LossWeights::default();
    w.0[1] = 2.0;
    let base = standard_loss(&m, &pairs, &LossWeights::default()).unwrap();
    let weighted = standard_loss(&m, &pairs, &w).unwrap();
    assert!((weighted.total - base.total - base.get("seg").unwrap()).abs() < 1e-6);
    assert_eq!(weighted.components, base.components);
}

#[test]
fn cooperative_gradient_is_sum_of_parts() {
    let m = model();
    let pairs = vec![pair(10), pair(11)];
    let hard: Vec<_> = pairs.iter().enumerate().map(|(i, p)| hard_for(&m, p, 10 + i as u64)).collect();
    let coop = batch_gradients(&m, &pairs, Some(&hard), &LossWeights::default()).unwrap();
    let std = batch_gradients(&m, &pairs, None, &LossWeights::default()).unwrap();
    let hard_only = batch_gradients(&m, &pairs, Some(&hard), &LossWeights([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])).unwrap();
    for (i, param) in m.params().iter().enumerate() {
        let c = coop.grads[i].as_ref().unwrap();
        let s = std.grads[i].as_ref().unwrap();
        let h = hard_only.grads[i].as_ref().unwrap();
        for k in 0..c.numel() {
            let want = s.data()[k] + h.data()[k];
            let got = c.data()[k];
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{} [{k}]: {got} vs {want}", param.name);
        }
    }
}

#[test]
fn batch_gradients_are_deterministic() {
    let m = model();
    let pairs = vec![pair(12), pair(13)];
    let a = batch_gradients(&m, &pairs, None, &LossWeights::default()).unwrap();
    let b = batch_gradients(&m, &pairs, None, &LossWeights::default()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.grads, b.grads);
}
