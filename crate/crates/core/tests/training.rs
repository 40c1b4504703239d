use lsda_core::losses::{batch_gradients, LossWeights, Pair};
use lsda_core::masking::{generate_hard_example, MaskConfig};
use lsda_core::networks::{ArchConfig, ModelBundle};
use lsda_core::synthdata::{generate, GenRequest, Split};
use lsda_core::trainer::{adam_step, AdamConfig, AdamState, Mode, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_arch(size: usize) -> ArchConfig {
    ArchConfig {
        height: size,
        width: size,
        classes: 4,
        widths: vec![8, 16, 16],
        latent_channels: 16,
    }
}

fn pairs(size: usize, count: usize, seed: u64) -> Vec<Pair> {
    let req = GenRequest {
        height: size,
        width: size,
        ..GenRequest::new(Split::Train, count, seed)
    };
    generate(&req).unwrap().pairs().unwrap()
}

fn trainer(arch: ArchConfig, mode: Mode, lr: f64, weights: LossWeights) -> Trainer {
    Trainer::new(TrainConfig {
        mode,
        arch,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        batch_size: 1,
        weights,
        ..TrainConfig::default()
    })
    .unwrap()
}

#[test]
fn autoencoder_reconstruction_keeps_falling() {
    let data = pairs(32, 1, 3);
    let mut w = [0.0; 8];
    w[0] = 1.0;
    let mut t = trainer(small_arch(32), Mode::Standard, 1e-3, LossWeights(w));
    let mut mse = Vec::new();
    for _ in 0..200 {
        let r = t.train_step(&data, &[0]).unwrap();
        mse.push(r.components[0].1);
    }
    for i in 0..mse.len() - 50 {
        assert!(mse[i + 50] < mse[i], "mse[{}]={} vs mse[{i}]={}", i + 50, mse[i + 50], mse[i]);
    }
}

#[test]
fn overfits_one_sample() {
    let data = pairs(32, 1, 5);
    let mut t = trainer(small_arch(32), Mode::Standard, 1e-3, LossWeights::default());
    for _ in 0..400 {
        t.train_step(&data, &[0]).unwrap();
    }
    let pred = t.bundle.ftn_predict(&data[0].x).unwrap().labels();
    let truth = data[0].y.argmax_channels().unwrap();
    let agree = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    let frac = agree as f64 / truth.len() as f64;
    assert!(frac >= 0.99, "pixel agreement {frac}");
}

#[test]
fn standard_loss_falls_on_ten_samples() {
    let data = pairs(32, 10, 11);
    let mut t = Trainer::new(TrainConfig {
        arch: small_arch(32),
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        batch_size: 10,
        ..TrainConfig::default()
    })
    .unwrap();
    let mut totals = Vec::new();
    while totals.len() < 200 {
        totals.extend(t.train_epoch(&data).unwrap().into_iter().map(|r| r.total));
    }
    assert!(totals[199] < totals[0], "{} -> {}", totals[0], totals[199]);
}

#[test]
fn shape_correction_loss_falls_on_fixed_hard_batch() {
    let data = pairs(32, 4, 17);
    let mut bundle = ModelBundle::new(small_arch(32), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hard: Vec<_> = data
        .iter()
        .map(|p| generate_hard_example(&bundle, &p.x, &p.y, &MaskConfig::default(), &mut rng).unwrap())
        .collect();
    let mut state = AdamState::new(&bundle);
    let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let mut shp = Vec::new();
    for _ in 0..200 {
        let bg = batch_gradients(&bundle, &data, Some(&hard), &LossWeights::default()).unwrap();
        shp.push(bg.report.get("hard_shp_p_hat").unwrap());
        adam_step(&mut bundle, &bg.grads, &mut state, &cfg).unwrap();
    }
    assert!(shp[199] < shp[0], "{} -> {}", shp[0], shp[199]);
    assert!(shp[199] < 0.5 * shp[0], "{} -> {}", shp[0], shp[199]);
}
