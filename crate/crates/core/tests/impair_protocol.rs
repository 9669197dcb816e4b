//! Sweep-protocol behavior driven by a cheap color-threshold predictor:
//! degenerate mixes are flat, endpoints reproduce plain evaluations, and
//! corruption can only hurt a clean-trained classifier.

use cmsnet_core::annotation::ClassTable;
use cmsnet_core::impair::{
    apply_noise, condition_mix_sweep, severity_sweep, ImpairmentKind, Predictor,
};
use cmsnet_core::map::ClassMap;
use cmsnet_core::metrics::ConfusionMatrix;
use cmsnet_core::tensor::Tensor;
use cmsnet_core::toy::generate_toy;
use cmsnet_core::train::LabeledSample;

/// Nearest-palette-color classifier for the toy scenes; degrades naturally
/// under pixel noise.
struct ColorStub {
    palette: Vec<[f32; 3]>,
}

impl ColorStub {
    fn new() -> Self {
        ColorStub {
            palette: vec![
                [0.480, 0.460, 0.430],
                [0.575, 0.550, 0.515],
                [0.740, 0.300, 0.240],
                [0.220, 0.300, 0.740],
            ],
        }
    }
}

impl Predictor for ColorStub {
    fn predict_map(&self, image: &Tensor<f32>) -> cmsnet_core::Result<ClassMap> {
        let s = image.shape();
        let mut map = ClassMap::filled(s.h, s.w, 0);
        for y in 0..s.h {
            for x in 0..s.w {
                let px = [image.at(0, 0, y, x), image.at(0, 1, y, x), image.at(0, 2, y, x)];
                let mut best = 0u8;
                let mut best_d = f32::INFINITY;
                for (i, p) in self.palette.iter().enumerate() {
                    let d: f32 = (0..3).map(|c| (px[c] - p[c]).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i as u8;
                    }
                }
                map.set(y, x, best);
            }
        }
        Ok(map)
    }
    fn class_count(&self) -> usize {
        4
    }
}

fn toy_pool(count: usize, seed: u64) -> Vec<LabeledSample> {
    generate_toy(count, 48, 32, &ClassTable::default_eval(), seed).unwrap().samples
}

fn noised_copies(pool: &[LabeledSample], severity: f64, seed: u64) -> Vec<LabeledSample> {
    pool.iter()
        .enumerate()
        .map(|(i, s)| LabeledSample {
            image: apply_noise(&s.image, severity, seed + i as u64).unwrap(),
            mask: s.mask.clone(),
            condition: s.condition,
        })
        .collect()
}

fn class_names() -> Vec<String> {
    ClassTable::default_eval().names()
}

#[test]
fn degenerate_mix_is_flat_and_extremes_agree_exactly() {
    let pool = toy_pool(8, 11);
    let model = ColorStub::new();
    // set_size == pool size: both extremes evaluate the whole pool.
    let report = condition_mix_sweep(
        &model,
        &pool,
        &pool,
        5,
        pool.len(),
        42,
        &class_names(),
        ("stub", "clean", "clean"),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 5);
    let first = report.rows.first().unwrap().miou;
    let last = report.rows.last().unwrap().miou;
    assert_eq!(first.to_bits(), last.to_bits(), "extremes draw the full identical pool");
    for row in &report.rows {
        assert!((row.miou - first).abs() < 0.05, "flat curve expected, got {}", row.miou);
    }
}

#[test]
fn two_steps_give_pure_clean_and_pure_adverse_rows() {
    let clean = toy_pool(6, 13);
    let adverse = noised_copies(&clean, 0.25, 99);
    let model = ColorStub::new();
    let report = condition_mix_sweep(
        &model,
        &clean,
        &adverse,
        2,
        6,
        7,
        &class_names(),
        ("stub", "clean", "noise"),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].x, 0.0);
    assert_eq!(report.rows[1].x, 1.0);

    // Endpoint rows equal plain evaluations of the full pools.
    let eval_pool = |pool: &[LabeledSample]| {
        let mut cm = ConfusionMatrix::new(&class_names(), Some(cmsnet_core::IGNORE_INDEX));
        for s in pool {
            let pred = model.predict_map(&s.image).unwrap();
            cm.accumulate(&s.mask, &pred).unwrap();
        }
        cm.mean_iou_f64().unwrap()
    };
    assert_eq!(report.rows[0].miou.to_bits(), eval_pool(&clean).to_bits());
    assert_eq!(report.rows[1].miou.to_bits(), eval_pool(&adverse).to_bits());
}

#[test]
fn corruption_cannot_help_at_the_endpoints() {
    let clean = toy_pool(8, 17);
    let adverse = noised_copies(&clean, 0.25, 5);
    let model = ColorStub::new();
    let report = condition_mix_sweep(
        &model,
        &clean,
        &adverse,
        4,
        8,
        3,
        &class_names(),
        ("stub", "clean", "noise"),
    )
    .unwrap();
    let first = report.rows.first().unwrap().miou;
    let last = report.rows.last().unwrap().miou;
    assert!(last <= first, "noise-corrupted endpoint ({last}) must not beat clean ({first})");
}

#[test]
fn mix_sweep_rejects_oversized_set() {
    let pool = toy_pool(4, 1);
    let model = ColorStub::new();
    let err = condition_mix_sweep(
        &model,
        &pool,
        &pool,
        3,
        10,
        0,
        &class_names(),
        ("stub", "a", "b"),
    )
    .unwrap_err();
    assert!(err.to_string().contains("set_size"), "{err}");
}

#[test]
fn noise_severity_sweep_shape_and_direction() {
    let pool = toy_pool(8, 23);
    let model = ColorStub::new();
    let report = severity_sweep(
        &model,
        &pool,
        ImpairmentKind::GaussianNoise,
        3,
        0.25,
        4,
        &class_names(),
        "stub",
    )
    .unwrap();
    let xs: Vec<f64> = report.rows.iter().map(|r| r.x).collect();
    assert_eq!(xs, vec![0.0, 0.125, 0.25]);
    for pair in report.rows.windows(2) {
        assert!(pair[0].x < pair[1].x, "x strictly increasing");
    }

    // The zero-severity row reproduces the baseline evaluation exactly.
    let mut cm = ConfusionMatrix::new(&class_names(), Some(cmsnet_core::IGNORE_INDEX));
    for s in &pool {
        let pred = model.predict_map(&s.image).unwrap();
        cm.accumulate(&s.mask, &pred).unwrap();
    }
    assert_eq!(report.rows[0].miou.to_bits(), cm.mean_iou_f64().unwrap().to_bits());

    // Heavy noise must hurt the clean-image classifier.
    assert!(
        report.rows.last().unwrap().miou < report.rows[0].miou,
        "max-noise mIoU must fall below baseline"
    );
}

#[test]
fn fog_severity_sweep_uses_proportion_axis() {
    let pool = toy_pool(6, 29);
    let model = ColorStub::new();
    let report = severity_sweep(
        &model,
        &pool,
        ImpairmentKind::Fog,
        4,
        1.0,
        8,
        &class_names(),
        "stub",
    )
    .unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.rows[0].x, 0.0);
    assert_eq!(report.rows[3].x, 1.0);
    assert_eq!(report.rows[0].miou.to_bits(), {
        let mut cm = ConfusionMatrix::new(&class_names(), Some(cmsnet_core::IGNORE_INDEX));
        for s in &pool {
            cm.accumulate(&s.mask, &model.predict_map(&s.image).unwrap()).unwrap();
        }
        cm.mean_iou_f64().unwrap().to_bits()
    });
}

#[test]
fn sweep_csv_and_gnuplot_are_deterministic() {
    let pool = toy_pool(5, 31);
    let model = ColorStub::new();
    let run = || {
        severity_sweep(
            &model,
            &pool,
            ImpairmentKind::GaussianNoise,
            3,
            0.25,
            6,
            &class_names(),
            "stub",
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_gnuplot(), b.to_gnuplot());
    assert!(a.to_csv().starts_with("x,miou,iou_background,iou_road,iou_car,iou_person\n"));
}
