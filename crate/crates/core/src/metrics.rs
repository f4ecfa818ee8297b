//! Pixel confusion counts and the five overlap scores derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    pub fn scores(&self) -> Scores {
        scores(self)
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "confusion",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        match (p, t) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Which scores had an empty denominator and were set to 100.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vacuous {
    pub f1: bool,
    pub iou: bool,
    pub recall: bool,
    pub spec: bool,
    pub prec: bool,
}

impl Vacuous {
    pub fn any(&self) -> bool {
        self.f1 || self.iou || self.recall || self.spec || self.prec
    }
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub iou: f64,
    pub recall: f64,
    pub spec: f64,
    pub prec: f64,
    pub vacuous: Vacuous,
}

impl Scores {
    pub const NAMES: [&'static str; 5] = ["f1", "iou", "recall", "spec", "prec"];

    pub fn values(&self) -> [f64; 5] {
        [self.f1, self.iou, self.recall, self.spec, self.prec]
    }

    pub fn flags(&self) -> [bool; 5] {
        let v = &self.vacuous;
        [v.f1, v.iou, v.recall, v.spec, v.prec]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

fn ratio(num: u64, den: u64, vacuous: &mut bool) -> f64 {
    if den == 0 {
        *vacuous = true;
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let (tp, tn, fp, fn_) = (c.true_pos, c.true_neg, c.false_pos, c.false_neg);
    let mut v = Vacuous::default();
    Scores {
        f1: ratio(2 * tp, 2 * tp + fp + fn_, &mut v.f1),
        iou: ratio(tp, tp + fp + fn_, &mut v.iou),
        recall: ratio(tp, tp + fn_, &mut v.recall),
        spec: ratio(tn, tn + fp, &mut v.spec),
        prec: ratio(tp, tp + fp, &mut v.prec),
        vacuous: v,
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `79.82±1.89`
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2}±{s:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fn_,
        }
    }

    #[test]
    fn small_worked_example() {
        let s = counts(2, 0, 1, 1).scores();
        assert!((s.f1 - 66.67).abs() < 5e-3);
        assert!((s.iou - 50.0).abs() < 1e-12);
        assert!((s.recall - 66.67).abs() < 5e-3);
        assert!((s.prec - 66.67).abs() < 5e-3);
        assert_eq!(s.spec, 0.0);
        assert!(!s.vacuous.any());
    }

    #[test]
    fn identity_and_complement() {
        let gt = Mask::from_fn(6, 6, |i, j| i < 3 && j > 1);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(c, counts(12, 24, 0, 0));
        assert!(c.scores().values().iter().all(|&v| v == 100.0));
        let inv = Mask::from_fn(6, 6, |i, j| !gt.get(i, j));
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.true_pos, c.true_neg), (0, 0));
    }

    #[test]
    fn missed_lesion_scores_zero_and_flags_precision() {
        let s = counts(0, 20, 0, 5).scores();
        assert_eq!((s.f1, s.recall, s.iou), (0.0, 0.0, 0.0));
        assert_eq!(s.prec, 100.0);
        assert!(s.vacuous.prec && !s.vacuous.recall);
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        assert!(confusion(&Mask::empty(4, 4), &Mask::empty(4, 5)).is_err());
    }

    #[test]
    fn random_pairs_match_a_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let density = rng.random_range(0.0..1.0);
            let mut draw = || Mask::new(16, 16, (0..256).map(|_| rng.random_bool(density)).collect()).unwrap();
            let (pred, gt) = (draw(), draw());
            let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..16 {
                for j in 0..16 {
                    match (pred.get(i, j), gt.get(i, j)) {
                        (true, true) => tp += 1.0,
                        (false, false) => tn += 1.0,
                        (true, false) => fp += 1.0,
                        (false, true) => fn_ += 1.0,
                    }
                }
            }
            let s = confusion(&pred, &gt).unwrap().scores();
            let direct = |n: f64, d: f64| if d == 0.0 { 100.0 } else { 100.0 * n / d };
            let want = [
                direct(2.0 * tp, 2.0 * tp + fp + fn_),
                direct(tp, tp + fp + fn_),
                direct(tp, tp + fn_),
                direct(tn, tn + fp),
                direct(tp, tp + fp),
            ];
            for (got, want) in s.values().iter().zip(want) {
                assert!((got - want).abs() < 1e-9);
            }
            assert!(s.f1 >= s.iou);
        }
    }

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(&[1.0, 2.0, 3.0]), "2.00±1.00");
        assert_eq!(format_mean_std(&[79.82]), "79.82±0.00");
    }

    proptest! {
        #[test]
        fn f1_is_a_function_of_iou(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            prop_assume!(tp + fp + fn_ > 0);
            let s = counts(tp, tn, fp, fn_).scores();
            let iou = s.iou / 100.0;
            prop_assert!(s.f1 >= s.iou);
            prop_assert!((s.f1 / 100.0 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
            for v in s.values() {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }

        #[test]
        fn scores_ignore_pixel_order(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..80), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = bits.len();
            let pred = Mask::new(1, n, bits.iter().map(|b| b.0).collect()).unwrap();
            let gt = Mask::new(1, n, bits.iter().map(|b| b.1).collect()).unwrap();
            let mut shuffled = bits.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pred2 = Mask::new(1, n, shuffled.iter().map(|b| b.0).collect()).unwrap();
            let gt2 = Mask::new(1, n, shuffled.iter().map(|b| b.1).collect()).unwrap();
            prop_assert_eq!(confusion(&pred, &gt).unwrap().scores(), confusion(&pred2, &gt2).unwrap().scores());
        }
    }
}
