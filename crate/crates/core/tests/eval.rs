mod common;

use nae_core::data::{self, NoiseSpec};
use nae_core::eval::{self, MetricReport, BETA2, THRESHOLDS};
use nae_core::model::{GeneratorConfig, ModelParams, PredictorConfig};
use proptest::prelude::*;

#[test]
fn metrics_match_brute_force_confusion_matrices() {
    let mut maps = Vec::new();
    for seed in 0..20 {
        maps.push(common::metrics::random_map(seed));
    }
    for (pred, gt) in &maps {
        assert_eq!(eval::mae(pred, gt).unwrap(), common::metrics::brute_mae(pred, gt));
        assert_eq!(eval::f_measure_curve(pred, gt).unwrap(), common::metrics::brute_curve(pred, gt));
    }
    let report = MetricReport::from_maps(maps.iter().enumerate().map(|(i, (p, g))| (i, &p[..], &g[..]))).unwrap();
    let (mae, curve) = common::metrics::brute_report(&maps);
    assert_eq!(report.mae, mae);
    assert_eq!(report.f_curve, curve);
}

#[test]
fn mae_examples() {
    assert_eq!(eval::mae(&[0.5; 4], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.5);
    assert_eq!(eval::mae(&[1.0; 9], &[0.0; 9]).unwrap(), 1.0);
}

#[test]
fn perfect_precision_and_recall_give_one() {
    for b in [1, 7, 1000] {
        assert_eq!(eval::f_beta(b, b, b), 1.0);
    }
    let half_precision = (1.0 + BETA2) * 0.5 / (BETA2 * 0.5 + 1.0);
    assert!((eval::f_beta(5, 10, 5) - half_precision).abs() < 1e-15);
    assert!((half_precision - 0.565217).abs() < 1e-6);
}

fn tiny_params() -> ModelParams {
    ModelParams::init(
        PredictorConfig {
            widths: [2, 2, 2, 2, 2],
            reduced: 2,
            ..PredictorConfig::default()
        },
        GeneratorConfig::default(),
        4,
    )
}

#[test]
fn evaluate_decomposes_over_disjoint_sets() {
    let params = tiny_params();
    let a = data::synth_dataset("a", 1, 0, 3, 16, &NoiseSpec::none()).unwrap();
    let b = data::synth_dataset("b", 1, 1, 5, 16, &NoiseSpec::none()).unwrap();
    let (ra, _) = eval::evaluate(&params.predictor, &a).unwrap();
    let (rb, _) = eval::evaluate(&params.predictor, &b).unwrap();
    let (rab, _) = eval::evaluate(&params.predictor, &a.concat(&b)).unwrap();
    assert!((rab.mae - (3.0 * ra.mae + 5.0 * rb.mae) / 8.0).abs() < 1e-12);
    assert_ne!(ra, rb);
}

#[test]
fn report_is_internally_consistent() {
    let params = tiny_params();
    let ds = data::synth_dataset("c", 2, 0, 4, 16, &NoiseSpec::none()).unwrap();
    let (r, preds) = eval::evaluate(&params.predictor, &ds).unwrap();
    assert_eq!(preds.len(), 4);
    assert_eq!(r.f_curve.len(), THRESHOLDS);
    assert!((r.mean_f - r.f_curve.iter().sum::<f64>() / THRESHOLDS as f64).abs() < 1e-12);
    assert!(r.f_curve.iter().all(|f| (0.0..=1.0).contains(f)));
    assert!(eval::evaluate(&params.predictor, &ds.with_clean_labels().concat(&strip(&ds))).is_err());
}

fn strip(ds: &data::Dataset) -> data::Dataset {
    let mut d = ds.clone();
    d.pairs.iter_mut().for_each(|p| p.clean = None);
    d
}

#[test]
fn perfect_single_example() {
    let ds = data::synth_dataset("p", 3, 0, 1, 16, &NoiseSpec::none()).unwrap();
    let gt = ds.pairs[0].clean.as_ref().unwrap().data();
    let r = MetricReport::from_maps([(0, gt, gt)]).unwrap();
    assert_eq!(r.mae, 0.0);
    assert_eq!(r.max_f, 1.0);
    assert!(r.f_curve[1..].iter().all(|&f| f == 1.0));
}

#[test]
fn curve_plot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.png");
    let c: Vec<f64> = (0..256).map(|k| k as f64 / 255.0).collect();
    eval::write_curve_png(&path, &[&c, &[0.5; 256]]).unwrap();
    assert!(image::open(&path).is_ok());
}

proptest! {
    #[test]
    fn mae_is_symmetric_and_bounded(pairs in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..64)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = eval::mae(&a, &b).unwrap();
        prop_assert_eq!(m, eval::mae(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn curve_depends_only_on_binarizations(pred in prop::collection::vec(0usize..256, 4..40), gt in prop::collection::vec(any::<bool>(), 40), jitter in prop::collection::vec(0.0..0.999f64, 40)) {
        let g: Vec<f64> = gt[..pred.len()].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let exact: Vec<f64> = pred.iter().map(|&k| k as f64 / 255.0).collect();
        // Moving a value anywhere inside its threshold bin keeps every binarization.
        let moved: Vec<f64> = pred
            .iter()
            .zip(&jitter)
            .map(|(&k, &j)| if k == 255 { 1.0 } else { (k as f64 + j) / 255.0 })
            .collect();
        for (e, m) in exact.iter().zip(&moved) {
            prop_assume!(m >= e);
        }
        prop_assert_eq!(eval::f_measure_curve(&exact, &g).unwrap(), eval::f_measure_curve(&moved, &g).unwrap());
    }
}
