use proptest::prelude::*;

use super::*;
use crate::networks::ArchConfig;
use crate::synthdata::{generate, GenRequest, Split};
use crate::tensor::Tensor;

#[test]
fn dice_examples() {
    let gt = [1u8, 1, 1, 1, 0, 0, 0, 0];
    let pred = [0u8, 0, 1, 1, 1, 1, 0, 0];
    assert_eq!(dice(&pred, &gt, 1).unwrap(), 0.5);
    assert_eq!(dice(&gt, &gt, 1).unwrap(), 1.0);
    assert_eq!(dice(&[1, 1, 0], &[0, 0, 1], 1).unwrap(), 0.0);
    assert_eq!(dice(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
    assert!(matches!(dice(&[0], &[0, 0], 0), Err(Error::Dimension { .. })));
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(
        a in prop::collection::vec(0u8..4, 30),
        b in prop::collection::vec(0u8..4, 30),
        c in 0u8..4,
    ) {
        let d = dice(&a, &b, c).unwrap();
        prop_assert_eq!(d, dice(&b, &a, c).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
    }
}

fn dataset(n: usize) -> Dataset {
    generate(&GenRequest {
        height: 16,
        width: 16,
        ..GenRequest::new(Split::Test, n, 3)
    })
    .unwrap()
}

#[test]
fn ground_truth_predictor_scores_one() {
    let ds = dataset(4);
    let r = evaluate_with(&ds, "test", Stage::Ftn, |i| Ok(ds.samples[i].labels.clone())).unwrap();
    assert_eq!(r.count(), 4);
    assert!(r.per_sample.iter().flatten().all(|&d| d == 1.0));
    assert_eq!(r.mean_foreground(), 1.0);
}

#[test]
fn background_forced_model_scores_one_on_empty_scenes() {
    let mut ds = dataset(3);
    for s in &mut ds.samples {
        s.labels.fill(0);
    }
    let cfg = ArchConfig::tiny(16);
    let mut m = ModelBundle::new(cfg.clone(), 0).unwrap();
    let w0 = cfg.widths[0];
    for head in ["seg_decoder.head", "stn.decoder.head"] {
        m.set_param(&format!("{head}.weight"), Tensor::zeros(&[4, w0, 3, 3])).unwrap();
        m.set_param(&format!("{head}.bias"), Tensor::new(&[4], vec![10.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    }
    for stage in [Stage::Ftn, Stage::FtnStn] {
        let r = evaluate(&m, &ds, "empty", stage).unwrap();
        assert!(r.per_sample.iter().flatten().all(|&d| d == 1.0));
    }
}

/// Independent per-sample Dice: overlap counted through a confusion matrix.
fn confusion_dice(pred: &[u8], gt: &[u8], classes: usize) -> Vec<f64> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        m[p as usize][g as usize] += 1;
    }
    (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let p: usize = m[c].iter().sum();
            let g: usize = m.iter().map(|row| row[c]).sum();
            if p + g == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (p + g) as f64
            }
        })
        .collect()
}

#[test]
fn report_means_match_recomputation() {
    let ds = dataset(5);
    let m = ModelBundle::new(ArchConfig::tiny(16), 4).unwrap();
    let r = evaluate(&m, &ds, "test", Stage::Ftn).unwrap();
    let mut fg = 0.0;
    let mut cls = [0.0; 4];
    for s in &ds.samples {
        let pred = m.ftn_predict(&s.image).unwrap().labels();
        let d = confusion_dice(&pred, &s.labels, 4);
        fg += (d[1] + d[2] + d[3]) / 3.0;
        for c in 0..4 {
            cls[c] += d[c];
        }
    }
    assert!((r.mean_foreground() - fg / 5.0).abs() < 1e-12);
    for c in 0..4 {
        assert!((r.class_mean(c) - cls[c] / 5.0).abs() < 1e-12);
    }
    assert_eq!(r, evaluate(&m, &ds, "test", Stage::Ftn).unwrap());
}

#[test]
fn identity_correction_matches_fast_stage() {
    let ds = dataset(4);
    let m = ModelBundle::new(ArchConfig::tiny(16), 8).unwrap();
    let fast = evaluate(&m, &ds, "d", Stage::Ftn).unwrap();
    let ident = evaluate_staged(&m, &ds, "d", Stage::FtnStn, |p| Ok(p.clone())).unwrap();
    for (a, b) in fast.per_sample.iter().flatten().zip(ident.per_sample.iter().flatten()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn incompatible_dataset_is_rejected() {
    let ds = dataset(1);
    let m = ModelBundle::new(ArchConfig::tiny(32), 0).unwrap();
    assert!(matches!(evaluate(&m, &ds, "d", Stage::Ftn), Err(Error::Dimension { .. })));
}

fn fixed_report(domain: &str) -> DomainReport {
    DomainReport {
        domain: domain.into(),
        stage: Stage::FtnStn,
        classes: 4,
        per_sample: vec![vec![1.0, 0.5, 0.25, 1.0], vec![1.0, 1.0, 0.75, 0.0]],
    }
}

#[test]
fn csv_matches_golden_text() {
    let csv = report_csv(&[fixed_report("test")]);
    let golden = "domain,stage,class,dice_mean,dice_std,count\n\
test,ftn+stn,0,1.000000,0.000000,2\n\
test,ftn+stn,1,0.750000,0.250000,2\n\
test,ftn+stn,2,0.500000,0.250000,2\n\
test,ftn+stn,3,0.500000,0.500000,2\n\
test,ftn+stn,mean_fg,0.583333,0.000000,2\n";
    assert_eq!(csv, golden);
    let rows = read_report_csv(&csv).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].class, "mean_fg");
    assert!(read_report_csv("a,b\n").is_err());
}

#[test]
fn svg_has_one_box_per_domain() {
    let svg = box_plot_svg(&[fixed_report("a"), fixed_report("b<c")]);
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<rect").count(), 2);
    assert!(svg.contains("b&lt;c"));
}
