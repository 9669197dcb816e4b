//! Independent set-based metric oracle: every statistic recomputed from raw
//! pixel sets (explicit intersection/union counting) in exact rational
//! arithmetic, compared against the confusion-matrix route on random maps.

use cmsnet_core::map::{ClassMap, IGNORE_INDEX};
use cmsnet_core::metrics::ConfusionMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rat(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// All six statistics recomputed by direct set counting over the pixel maps,
/// never touching the confusion matrix.
struct SetOracle {
    pixel_accuracy: BigRational,
    class_pixel_accuracy: Vec<Option<BigRational>>,
    mean_accuracy: BigRational,
    iou: Vec<Option<BigRational>>,
    mean_iou: BigRational,
    fw_iou: BigRational,
}

fn set_oracle(truth: &ClassMap, pred: &ClassMap, n_cl: usize) -> SetOracle {
    let counted: Vec<(u8, u8)> = truth
        .data
        .iter()
        .zip(&pred.data)
        .filter(|(&t, _)| t != IGNORE_INDEX)
        .map(|(&t, &p)| (t, p))
        .collect();
    let total = counted.len() as u64;

    let correct = counted.iter().filter(|(t, p)| t == p).count() as u64;
    let pixel_accuracy = rat(correct, total);

    let mut class_pixel_accuracy = Vec::new();
    let mut iou = Vec::new();
    for c in 0..n_cl as u8 {
        let truth_set = counted.iter().filter(|(t, _)| *t == c).count() as u64;
        let pred_set = counted.iter().filter(|(_, p)| *p == c).count() as u64;
        let intersection = counted.iter().filter(|(t, p)| *t == c && *p == c).count() as u64;
        let union = truth_set + pred_set - intersection;
        class_pixel_accuracy.push((truth_set > 0).then(|| rat(intersection, truth_set)));
        iou.push((union > 0).then(|| rat(intersection, union)));
    }

    let present_acc: Vec<&BigRational> = class_pixel_accuracy.iter().flatten().collect();
    let mean_accuracy = present_acc.iter().fold(BigRational::zero(), |a, b| a + *b)
        / BigRational::from(BigInt::from(present_acc.len() as u64));
    let present_iou: Vec<&BigRational> = iou.iter().flatten().collect();
    let mean_iou = present_iou.iter().fold(BigRational::zero(), |a, b| a + *b)
        / BigRational::from(BigInt::from(present_iou.len() as u64));

    let mut fw = BigRational::zero();
    for c in 0..n_cl {
        let t_c = counted.iter().filter(|(t, _)| *t == c as u8).count() as u64;
        if t_c > 0 {
            if let Some(v) = &iou[c] {
                fw += BigRational::from(BigInt::from(t_c)) * v;
            }
        }
    }
    let fw_iou = fw / BigRational::from(BigInt::from(total));

    SetOracle { pixel_accuracy, class_pixel_accuracy, mean_accuracy, iou, mean_iou, fw_iou }
}

fn random_map(rng: &mut ChaCha8Rng, n_cl: usize, with_ignore: bool) -> ClassMap {
    let data: Vec<u8> = (0..64)
        .map(|_| {
            if with_ignore && rng.gen_bool(0.05) {
                IGNORE_INDEX
            } else {
                rng.gen_range(0..n_cl as u8)
            }
        })
        .collect();
    ClassMap::from_vec(8, 8, data).unwrap()
}

#[test]
fn thousand_random_pairs_match_set_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for case in 0..1000 {
        let n_cl = rng.gen_range(2..=5usize);
        let truth = random_map(&mut rng, n_cl, case % 3 == 0);
        let pred = random_map(&mut rng, n_cl, false);
        let mut cm = ConfusionMatrix::with_classes(n_cl);
        cm.accumulate(&truth, &pred).unwrap();
        if cm.grand_total() == 0 {
            continue;
        }
        let oracle = set_oracle(&truth, &pred, n_cl);

        assert_eq!(cm.pixel_accuracy().unwrap(), oracle.pixel_accuracy, "case {case}");
        assert_eq!(cm.mean_accuracy().unwrap(), oracle.mean_accuracy, "case {case}");
        assert_eq!(cm.mean_iou().unwrap(), oracle.mean_iou, "case {case}");
        assert_eq!(cm.fw_iou().unwrap(), oracle.fw_iou, "case {case}");
        for c in 0..n_cl {
            assert_eq!(
                cm.class_pixel_accuracy(c).unwrap(),
                oracle.class_pixel_accuracy[c],
                "case {case} class {c} accuracy"
            );
            assert_eq!(cm.iou(c).unwrap(), oracle.iou[c], "case {case} class {c} iou");
        }
    }
}

#[test]
fn metrics_bounded_by_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for _ in 0..50 {
        let n_cl = rng.gen_range(2..=5usize);
        let truth = random_map(&mut rng, n_cl, true);
        let pred = random_map(&mut rng, n_cl, false);
        let mut cm = ConfusionMatrix::with_classes(n_cl);
        cm.accumulate(&truth, &pred).unwrap();
        if cm.grand_total() == 0 {
            continue;
        }
        for v in [
            cm.pixel_accuracy_f64().unwrap(),
            cm.mean_accuracy_f64().unwrap(),
            cm.mean_iou_f64().unwrap(),
            cm.fw_iou_f64().unwrap(),
        ] {
            assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
        }
    }
}

proptest! {
    /// Relabeling classes consistently in truth and prediction permutes the
    /// per-class values and leaves the aggregates unchanged.
    #[test]
    fn permutation_invariance(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_cl = 4usize;
        let truth = random_map(&mut rng, n_cl, false);
        let pred = random_map(&mut rng, n_cl, false);
        let perm: [u8; 4] = [2, 0, 3, 1];

        let mut cm = ConfusionMatrix::with_classes(n_cl);
        cm.accumulate(&truth, &pred).unwrap();

        let relabel = |m: &ClassMap| ClassMap::from_vec(
            m.h, m.w, m.data.iter().map(|&v| perm[v as usize]).collect()).unwrap();
        let mut cm_p = ConfusionMatrix::with_classes(n_cl);
        cm_p.accumulate(&relabel(&truth), &relabel(&pred)).unwrap();

        prop_assert_eq!(cm.pixel_accuracy().unwrap(), cm_p.pixel_accuracy().unwrap());
        prop_assert_eq!(cm.mean_iou().unwrap(), cm_p.mean_iou().unwrap());
        prop_assert_eq!(cm.fw_iou().unwrap(), cm_p.fw_iou().unwrap());
        for c in 0..n_cl {
            prop_assert_eq!(cm.iou(c).unwrap(), cm_p.iou(perm[c] as usize).unwrap());
        }
    }

    /// Per-image accumulation then merge equals accumulating a concatenated
    /// stream (associativity).
    #[test]
    fn accumulate_is_associative(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_cl = 3usize;
        let images: Vec<(ClassMap, ClassMap)> = (0..4)
            .map(|_| (random_map(&mut rng, n_cl, true), random_map(&mut rng, n_cl, false)))
            .collect();

        let mut whole = ConfusionMatrix::with_classes(n_cl);
        for (t, p) in &images {
            whole.accumulate(t, p).unwrap();
        }

        let mut merged = ConfusionMatrix::with_classes(n_cl);
        for (t, p) in &images {
            let mut per = ConfusionMatrix::with_classes(n_cl);
            per.accumulate(t, p).unwrap();
            merged.merge(&per).unwrap();
        }
        prop_assert_eq!(whole, merged);
    }

    /// Balanced class frequencies collapse FWIoU onto mIoU.
    #[test]
    fn fw_iou_equals_mean_iou_when_balanced(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_cl = 4usize;
        // Truth: exactly 16 pixels of each class.
        let mut ids: Vec<u8> = (0..64).map(|i| (i % n_cl) as u8).collect();
        // Deterministic in-place shuffle.
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let truth = ClassMap::from_vec(8, 8, ids).unwrap();
        let pred = random_map(&mut rng, n_cl, false);
        let mut cm = ConfusionMatrix::with_classes(n_cl);
        cm.accumulate(&truth, &pred).unwrap();
        prop_assert_eq!(cm.fw_iou().unwrap(), cm.mean_iou().unwrap());
    }
}
