use idet_core::metrics::{binarize, confusion, metrics_from_confusion, ConfusionCounts, Mask};
use idet_core::{RngSeed, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts { tp, tn, fp, fn_ }
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.random_bool(p))
}

#[test]
fn all_ones_prediction_of_all_ones_truth() {
    let m = Mask::from_fn(4, 5, |_, _| true);
    assert_eq!(confusion(&m, &m).unwrap(), counts(20, 0, 0, 0));
}

#[test]
fn complement_prediction_has_no_true_hits() {
    let gt = Mask::from_fn(6, 6, |y, x| (y + x) % 3 == 0);
    let pred = Mask::from_fn(6, 6, |y, x| !gt.get(y, x));
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert_eq!(c.total(), 36);
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(confusion(&Mask::zeros(2, 2), &Mask::zeros(2, 3)).is_err());
}

#[test]
fn counting_oracle_on_random_pairs() {
    let mut rng = RngSeed(11).rng();
    for _ in 0..100 {
        let p = rng.random_range(0.05..0.95);
        let (pred, gt) = (random_mask(&mut rng, 16, 16, p), random_mask(&mut rng, 16, 16, 0.3));
        let c = confusion(&pred, &gt).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for y in 0..16 {
            for x in 0..16 {
                match (pred.get(y, x), gt.get(y, x)) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
        assert_eq!(c, counts(tp, tn, fp, fn_));
        let r = metrics_from_confusion(&c).unwrap();
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let p = tp / (tp + fp);
        let rc = tp / (tp + fn_);
        assert!((r.precision - p).abs() <= 1e-12);
        assert!((r.recall - rc).abs() <= 1e-12);
        assert!((r.f1 - 2.0 * p * rc / (p + rc)).abs() <= 1e-12);
        assert!((r.oa - (tp + tn) / 256.0).abs() <= 1e-12);
        assert!((r.iou - tp / (tp + fp + fn_)).abs() <= 1e-12);
    }
}

#[test]
fn harmonic_mean_of_reported_precision_and_recall() {
    let (p, r) = (0.935_f64, 0.945_f64);
    let f1 = 2.0 * p * r / (p + r);
    assert!((f1 - 0.940).abs() < 0.05);
    assert!((f1 - 0.93997).abs() < 1e-4);
}

#[test]
fn analytic_examples() {
    let r = metrics_from_confusion(&counts(1, 1, 1, 1)).unwrap();
    assert_eq!(r.oa, 0.5);
    let r = metrics_from_confusion(&counts(50, 0, 25, 25)).unwrap();
    assert!((r.iou - 0.5).abs() < 1e-15);
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!(!r.degenerate);
}

#[test]
fn zero_denominators_report_zero_with_flag() {
    let r = metrics_from_confusion(&counts(0, 10, 0, 0)).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.iou), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.oa, 1.0);
    assert!(r.degenerate);
    assert!(metrics_from_confusion(&counts(0, 0, 0, 0)).is_err());
}

#[test]
fn binarize_examples_and_oracle() {
    let ones = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| if i >= 4 { 1.0 } else { 0.0 });
    assert_eq!(binarize(&ones).unwrap()[0].count_ones(), 4);
    let ties = Tensor::<f32>::full(&[2, 2, 3, 3], 0.25);
    assert!(binarize(&ties).unwrap().iter().all(|m| m.count_ones() == 0));
    assert!(binarize(&Tensor::<f32>::zeros(&[1, 3, 2, 2])).is_err());

    let mut rng = RngSeed(3).rng();
    let logits = Tensor::<f64>::from_fn(&[3, 2, 5, 7], |_| rng.random_range(-1.0..1.0));
    let masks = binarize(&logits).unwrap();
    let d = logits.data();
    for (n, m) in masks.iter().enumerate() {
        for y in 0..5 {
            for x in 0..7 {
                let c0 = d[((n * 2) * 5 + y) * 7 + x];
                let c1 = d[((n * 2 + 1) * 5 + y) * 7 + x];
                assert_eq!(m.get(y, x), c1 > c0);
            }
        }
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gt = Mask::from_fn(8, 8, |y, x| y > x);
    let r = metrics_from_confusion(&confusion(&gt, &gt).unwrap()).unwrap();
    assert_eq!((r.precision, r.recall, r.f1, r.oa, r.iou), (1.0, 1.0, 1.0, 1.0, 1.0));
}

fn arb_counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..10_000, 0u64..10_000, 0u64..10_000, 0u64..10_000).prop_map(|(tp, tn, fp, fn_)| counts(tp, tn, fp, fn_))
}

proptest! {
    #[test]
    fn iou_never_exceeds_f1(c in arb_counts()) {
        prop_assume!(c.tp + c.fp + c.fn_ > 0);
        let r = metrics_from_confusion(&c).unwrap();
        prop_assert!(r.iou <= r.f1 + 1e-15);
        for v in [r.precision, r.recall, r.f1, r.oa, r.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn f1_is_harmonic_mean(c in arb_counts()) {
        let r = metrics_from_confusion(&c);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        prop_assume!(r.precision + r.recall > 0.0);
        let f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
        prop_assert!((r.f1 - f1).abs() <= 1e-12);
    }

    #[test]
    fn counts_are_additive_across_shards(seed in any::<u64>(), split in 1usize..15) {
        let mut rng = RngSeed(seed).rng();
        let pred = random_mask(&mut rng, 16, 16, 0.4);
        let gt = random_mask(&mut rng, 16, 16, 0.4);
        let whole = confusion(&pred, &gt).unwrap();
        let top = |m: &Mask| Mask::new(split, 16, m.data()[..split * 16].to_vec()).unwrap();
        let bottom = |m: &Mask| Mask::new(16 - split, 16, m.data()[split * 16..].to_vec()).unwrap();
        let parts = confusion(&top(&pred), &top(&gt)).unwrap() + confusion(&bottom(&pred), &bottom(&gt)).unwrap();
        prop_assert_eq!(whole, parts);
        prop_assert_eq!(whole.total(), 256);
    }
}
