//! Checks on the default reference workload: the trained MLP, its data and
//! the pinned numbers measured on it.

mod common;

use std::sync::OnceLock;

use ptq_reliability::archive::{load_model, save_model};
use ptq_reliability::calibrate::calibrate_network;
use ptq_reliability::calibset::sample_random;
use ptq_reliability::engine::forward_with_capture;
use ptq_reliability::experiment::sha256_hex;
use ptq_reliability::harness::{run_benchmark, run_trial, BitWidths, TrialSettings, Workload};
use ptq_reliability::quant::{fake_quant, QuantizedModel};
use ptq_reliability::reference::{ReferenceArtifacts, ReferenceWorkload};
use ptq_reliability::{evaluate, forward, CalibSpec, MetricKind, SearchConfig, SiteId, Tensor};

const PINNED_FP_AVERAGE: f64 = 0.9723;
const PINNED_W4A4_SEED0: [f64; 10] = [0.988, 0.996, 0.997, 0.95, 0.945, 0.989, 0.99, 0.955, 0.911, 0.944];
const PINNED_W8A8_MEAN: f64 = 0.9714780000000003;

fn reference() -> &'static ReferenceArtifacts {
    static CELL: OnceLock<ReferenceArtifacts> = OnceLock::new();
    CELL.get_or_init(|| ReferenceWorkload::default().build().unwrap())
}

fn work() -> Workload<'static> {
    let r = reference();
    Workload {
        model: &r.model,
        train: &r.train,
        test: &r.test,
    }
}

fn settings(metric: MetricKind, bits: u8) -> TrialSettings {
    TrialSettings {
        metric,
        bits: Some(BitWidths::uniform(bits).unwrap()),
        calib: CalibSpec::default(),
        search: SearchConfig::default(),
    }
}

fn first_rows(t: &Tensor, n: usize) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    Tensor::new(shape, t.data()[..n * row].to_vec()).unwrap()
}

#[test]
fn fp_accuracy_is_pinned() {
    let fp = evaluate(&reference().model, &reference().test, None).unwrap();
    assert!(fp.average >= 0.90, "{}", fp.average);
    assert_eq!(fp.average, PINNED_FP_AVERAGE);
}

#[test]
fn training_loss_trends_down() {
    let losses = &reference().epoch_losses;
    assert!(losses.iter().all(|l| l.is_finite()));
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{losses:?}");
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn logits_match_naive_loops() {
    let r = reference();
    let batch = first_rows(r.test.images(), 16);
    let logits = forward(&r.model, &batch).unwrap();
    let mut worst = 0.0f32;
    for i in 0..16 {
        let naive = common::naive_mlp_forward(&r.model, r.test.image(i));
        for (a, b) in logits.row(i).iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
}

#[test]
fn fp_evaluation_matches_recount() {
    let r = reference();
    let classes = r.test.class_count();
    let (mut correct, mut total) = (vec![0usize; classes], vec![0usize; classes]);
    for i in 0..r.test.len() {
        let logits = common::naive_mlp_forward(&r.model, r.test.image(i));
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        let label = r.test.labels()[i];
        total[label] += 1;
        correct[label] += (best == label) as usize;
    }
    let fp = evaluate(&r.model, &r.test, None).unwrap();
    assert_eq!(fp.correct, correct);
    assert_eq!(fp.total, total);
    let per_class: Vec<f64> = correct.iter().zip(&total).map(|(&c, &t)| c as f64 / t as f64).collect();
    assert_eq!(fp.per_class, per_class);
    let weighted: f64 = per_class.iter().zip(&total).map(|(a, &t)| a * t as f64).sum::<f64>() / r.test.len() as f64;
    assert!((fp.average - weighted).abs() <= 1e-12);
    assert_eq!(fp.average, correct.iter().sum::<usize>() as f64 / r.test.len() as f64);
}

#[test]
fn model_archive_checksum_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ptq"), dir.path().join("b.ptq"));
    save_model(&reference().model, &a).unwrap();
    let loaded = load_model(&a).unwrap();
    assert_eq!(loaded, reference().model);
    save_model(&loaded, &b).unwrap();
    assert_eq!(sha256_hex(&std::fs::read(&a).unwrap()), sha256_hex(&std::fs::read(&b).unwrap()));
}

#[test]
fn generous_eight_bit_scales_stay_close_to_fp() {
    let r = reference();
    let calib = sample_random(&r.train, 256, 0).unwrap();
    let config = calibrate_network(&r.model, &calib, MetricKind::MinMax, 8, 8, &SearchConfig::default()).unwrap();
    let fp = evaluate(&r.model, &r.test, None).unwrap().average;
    let q = evaluate(&r.model, &r.test, Some(&config)).unwrap().average;
    assert!((fp - q).abs() <= 0.005, "fp {fp} W8A8 {q}");
}

#[test]
fn first_layer_fake_quant_matches_standalone() {
    let r = reference();
    let calib = sample_random(&r.train, 32, 1).unwrap();
    let config = calibrate_network(&r.model, &calib, MetricKind::Mse, 4, 4, &SearchConfig::default()).unwrap();
    let first = *r.model.quantizable_layers().first().unwrap();
    let site = SiteId::input(first);
    let batch = first_rows(r.test.images(), 64);
    let (_, fp_inputs) = forward_with_capture(&r.model, &batch, &[site]).unwrap();
    let qmodel = QuantizedModel::new(&r.model, &config).unwrap();
    let (_, q_inputs) = qmodel.forward_with_capture(&batch).unwrap();
    let expected = fake_quant(&fp_inputs[&site], config.get(&site).unwrap());
    assert_eq!(q_inputs[&site], expected);
}

#[test]
fn w4a4_seed0_trial_is_pinned() {
    let t = run_trial(work(), &settings(MetricKind::Mse, 4), 0).unwrap();
    assert_eq!(t.per_class, PINNED_W4A4_SEED0.to_vec());
    assert_eq!(t, run_trial(work(), &settings(MetricKind::Mse, 4), 0).unwrap());
}

#[test]
fn w8a8_mse_suite_within_one_point_of_fp() {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = run_benchmark(work(), &settings(MetricKind::Mse, 8), 50, 0, workers).unwrap();
    let fp = report.average.fp_accuracy;
    for t in &report.trials {
        assert!((fp - t.average).abs() <= 0.01, "seed {}: {} vs fp {fp}", t.seed, t.average);
    }
    assert_eq!(report.average.mean, PINNED_W8A8_MEAN);
}
