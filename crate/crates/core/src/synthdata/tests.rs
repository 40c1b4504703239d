use std::collections::VecDeque;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn small(split: Split, count: usize, seed: u64) -> Dataset {
    generate(&GenRequest {
        height: 32,
        width: 32,
        ..GenRequest::new(split, count, seed)
    })
    .unwrap()
}

#[test]
fn samples_are_deterministic_in_seed_and_index() {
    let s = &PhantomStyle::standard();
    let a = gen_sample(5, 3, 64, 64, s).unwrap();
    assert_eq!(a, gen_sample(5, 3, 64, 64, s).unwrap());
    assert_ne!(a.image, gen_sample(5, 4, 64, 64, s).unwrap().image);
    assert_ne!(a.image, gen_sample(6, 3, 64, 64, s).unwrap().image);
    // Index k of a dataset does not depend on how many samples precede it.
    let ds = generate(&GenRequest {
        first_index: 3,
        ..GenRequest::new(Split::Train, 1, 5)
    })
    .unwrap();
    assert_eq!(ds.samples[0], a);
}

#[test]
fn phantoms_have_all_classes_and_valid_range() {
    for seed in 0..20 {
        let s = gen_sample(seed, 0, 64, 64, &PhantomStyle::standard()).unwrap();
        for c in 0..4u8 {
            assert!(s.labels.contains(&c), "seed {seed} lacks class {c}");
        }
        SegProb::one_hot(&s.labels, 4, 64, 64).unwrap().validate(0.0).unwrap();
        assert!(s.image.min() >= 0.0 && s.image.max() <= 1.0);
    }
}

/// True when no 4-connected path through non-wall pixels leads from the
/// cavity to the canvas border.
fn wall_encloses_cavity(labels: &[u8], h: usize, w: usize) -> bool {
    let mut seen = vec![false; h * w];
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| labels[i] == 1).collect();
    if queue.is_empty() {
        return false;
    }
    for &i in &queue {
        seen[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
            return false;
        }
        for j in [i - w, i + w, i - 1, i + 1] {
            if !seen[j] && labels[j] != 2 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    true
}

#[test]
fn wall_surrounds_cavity_on_many_seeds() {
    for seed in 0..100 {
        let s = gen_sample(seed, seed, 64, 64, &PhantomStyle::standard()).unwrap();
        assert!(wall_encloses_cavity(&s.labels, 64, 64), "seed {seed}");
    }
}

#[test]
fn containment_oracle_detects_gaps() {
    let mut s = gen_sample(0, 0, 64, 64, &PhantomStyle::standard()).unwrap();
    let row = (0..64).find(|&r| (0..64).any(|c| s.labels[r * 64 + c] == 1)).unwrap();
    for r in 0..row {
        for c in 0..64 {
            if s.labels[r * 64 + c] == 2 {
                s.labels[r * 64 + c] = 0;
            }
        }
    }
    let col = (0..64).find(|&c| s.labels[row * 64 + c] == 1).unwrap();
    for r in 0..=row {
        s.labels[r * 64 + col] = if s.labels[r * 64 + col] == 1 { 1 } else { 0 };
    }
    assert!(!wall_encloses_cavity(&s.labels, 64, 64));
}

#[test]
fn impossible_canvas_exhausts_attempts() {
    let err = gen_sample(0, 0, 4, 4, &PhantomStyle::standard()).unwrap_err();
    assert!(matches!(err, Error::Geometry(MAX_GEOMETRY_ATTEMPTS)));
}

#[test]
fn zero_severity_is_identity() {
    let x = gen_sample(1, 0, 32, 32, &PhantomStyle::standard()).unwrap().image;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in Corruption::ALL {
        let y = c.apply(&x, 0.0, &mut rng).unwrap();
        assert_eq!(
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn severity_outside_unit_interval_is_rejected() {
    let x = Tensor::full(&[1, 8, 8], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for c in Corruption::ALL {
        for s in [-0.1, 1.1, f32::NAN] {
            assert!(matches!(c.apply(&x, s, &mut rng), Err(Error::Contract(_))));
        }
    }
}

#[test]
fn bias_ratio_stays_in_field_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let x = gen_sample(seed, 0, 64, 64, &PhantomStyle::standard()).unwrap().image;
        let y = corrupt_bias(&x, 0.5, &mut rng).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            if *a > 0.1 && *b < 1.0 {
                let r = b / a;
                let lim = (0.5 * BIAS_GAIN).exp();
                assert!((1.0 / lim - 1e-6..=lim + 1e-6).contains(&r), "{r}");
            }
        }
    }
}

#[test]
fn corruptions_change_images_but_not_labels() {
    let clean = small(Split::Test, 5, 9);
    for c in Corruption::ALL {
        let bad = small(Split::TestCorrupted(c), 5, 9);
        for (a, b) in clean.samples.iter().zip(&bad.samples) {
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.image, b.image, "{c:?}");
            assert!(SEVERITY_LEVELS.contains(&b.meta.severity));
            assert_eq!(b.meta.corruption, Some(c));
        }
    }
}

#[test]
fn bias_shift_moves_intensity_histogram() {
    let clean = generate(&GenRequest::new(Split::Test, 20, 4)).unwrap();
    let bad = generate(&GenRequest {
        severity: Some(0.8),
        ..GenRequest::new(Split::TestCorrupted(Corruption::Bias), 20, 4)
    })
    .unwrap();
    let d = histogram_l1(&intensity_histogram(&clean, 32), &intensity_histogram(&bad, 32));
    assert!(d > 0.05, "{d}");
}

#[test]
fn shifted_generator_changes_intensities() {
    let bg = |s: &Sample| {
        let v: Vec<f32> = s.labels.iter().zip(s.image.data()).filter(|(l, _)| **l == 0).map(|(_, v)| *v).collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    let (mut a, mut b) = (0.0, 0.0);
    for seed in 0..10 {
        let sa = gen_sample(seed, 0, 64, 64, &PhantomStyle::standard()).unwrap();
        let sb = gen_sample(seed, 0, 64, 64, &PhantomStyle::shifted()).unwrap();
        assert_eq!(sa.labels, sb.labels);
        a += bg(&sa);
        b += bg(&sb);
    }
    assert!(b / 10.0 > a / 10.0 + 0.05, "{a} {b}");
}

#[test]
fn split_tags_round_trip() {
    for s in ["train", "val", "test", "test-corrupted:bias", "test-corrupted:spike"] {
        assert_eq!(s.parse::<Split>().unwrap().to_string(), s);
    }
    assert!("test-corrupted:blur".parse::<Split>().is_err());
    assert!("holdout".parse::<Split>().is_err());
}

#[test]
fn dataset_round_trips() {
    let ds = small(Split::TestCorrupted(Corruption::Ghost), 3, 1);
    let bytes = ds.to_bytes().unwrap();
    assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.lsds");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);

    let empty = small(Split::Val, 0, 1);
    assert_eq!(Dataset::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
}

#[test]
fn damaged_files_report_offsets() {
    let ds = small(Split::Train, 2, 1);
    let bytes = ds.to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            r => panic!("cut {cut}: {:?}", r.map(|_| ())),
        }
    }

    let mut bad = bytes.clone();
    let last = bad.len() - 100;
    bad[last] ^= 0x40;
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Checksum { record: 1, .. })));
}

#[test]
fn default_suite_has_expected_sizes() {
    let suite = default_suite(0, &SuiteSizes { size: 32, train: 3, val: 2, test: 4 }).unwrap();
    assert_eq!((suite.train.len(), suite.val.len(), suite.test.len()), (3, 2, 4));
    assert_eq!(suite.corrupted.len(), 4);
    assert_eq!(suite.shifted.len(), 4);
    assert!(suite.shifted.manifest.shifted);
    let idx = |d: &Dataset| d.samples.iter().map(|s| s.meta.index).collect::<Vec<_>>();
    assert_eq!(idx(&suite.train), vec![0, 1, 2]);
    assert_eq!(idx(&suite.test), idx(&suite.corrupted[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corruptions_stay_in_unit_range(seed in 0u64..1000, sev in 0.0f32..=1.0, kind in 0usize..4) {
        let x = gen_sample(seed, 0, 32, 32, &PhantomStyle::standard()).unwrap().image;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Corruption::ALL[kind].apply(&x, sev, &mut rng).unwrap();
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
