//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// `counts[gt · K + pred]` over non-ignored pixels. Merging is elementwise
/// addition, so shards can be accumulated in any order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// `None` when no pixel was evaluated.
    pub miou: Option<f64>,
    pub pacc: Option<f64>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the pixels of one image. Predictions may not use the ignore value.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, ignore_index: u8) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Model(format!(
                "prediction {}x{} and ground truth {}x{} differ in shape",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Model(format!("class index out of range for {k} classes (gt {g}, pred {p})")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Model("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let k = self.num_classes;
        let total = self.total();
        if total == 0 {
            return SegMetrics { miou: None, pacc: None, per_class_iou: vec![None; k] };
        }
        let diag: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let ratios: Vec<Option<(u64, u64)>> = (0..k)
            .map(|c| {
                let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt + pred - self.get(c, c);
                (union > 0).then(|| (self.get(c, c), union))
            })
            .collect();
        let per_class_iou = ratios.iter().map(|r| r.map(|(i, u)| i as f64 / u as f64)).collect();
        let present: Vec<(u64, u64)> = ratios.into_iter().flatten().collect();
        SegMetrics { miou: Some(mean_of_ratios(&present)), pacc: Some(diag as f64 / total as f64), per_class_iou }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` fractions, summed exactly so the result is the
/// correctly rounded mean whenever the reduced fraction fits in 53 bits.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    let exact = || -> Option<(u128, u128)> {
        let (mut num, mut den) = (0u128, 1u128);
        for &(n, d) in ratios {
            let (n, d) = (n as u128, d as u128);
            num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
            den = den.checked_mul(d)?;
            let g = gcd(num, den).max(1);
            (num, den) = (num / g, den / g);
        }
        den = den.checked_mul(ratios.len() as u128)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    };
    match exact() {
        Some((num, den)) if num < 1 << 53 && den < 1 << 53 => num as f64 / den as f64,
        _ => ratios.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / ratios.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(rows: &[&[u8]]) -> Mask {
        Mask { height: rows.len(), width: rows[0].len(), data: rows.concat() }
    }

    #[test]
    fn hand_computed_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(&[&[0, 1], &[1, 1]]), &mask(&[&[0, 0], &[1, 1]]), 255).unwrap();
        let m = cm.metrics();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(m.miou, Some(7.0 / 12.0));
        assert_eq!(m.pacc, Some(0.75));
    }

    #[test]
    fn exact_mean_agrees_with_float_mean() {
        assert_eq!(mean_of_ratios(&[(1, 3), (1, 3), (1, 3)]), 1.0 / 3.0);
        assert_eq!(mean_of_ratios(&[(0, 5), (5, 5)]), 0.5);
        let huge = [(u64::MAX - 1, u64::MAX), (u64::MAX - 3, u64::MAX - 2), (7, 1 << 62)];
        let float = huge.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / 3.0;
        assert_eq!(mean_of_ratios(&huge), float);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = mask(&[&[0, 2], &[1, 1]]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt, 255).unwrap();
        assert!((0..3).all(|g| (0..3).all(|p| g == p || cm.get(g, p) == 0)));
        assert_eq!(cm.metrics().miou, Some(1.0));
        assert_eq!(cm.metrics().pacc, Some(1.0));
    }

    #[test]
    fn all_ignored_is_undefined() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(&[&[0, 1]]), &mask(&[&[255, 255]]), 255).unwrap();
        assert_eq!(cm.total(), 0);
        let m = cm.metrics();
        assert_eq!((m.miou, m.pacc), (None, None));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&mask(&[&[0, 1]]), &mask(&[&[0, 1]]), 255).unwrap();
        let m = cm.metrics();
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.miou, Some(1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&mask(&[&[0, 1]]), &mask(&[&[0], &[1]]), 255).is_err());
    }

    fn pixels(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<(u8, u8)>> {
        proptest::collection::vec((0u8..3, prop_oneof![0u8..3, Just(255u8)]), n)
    }

    fn matrix(px: &[(u8, u8)]) -> ConfusionMatrix {
        let pred = Mask { height: 1, width: px.len(), data: px.iter().map(|p| p.0).collect() };
        let gt = Mask { height: 1, width: px.len(), data: px.iter().map(|p| p.1).collect() };
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt, 255).unwrap();
        cm
    }

    proptest! {
        #[test]
        fn merging_shards_equals_one_pass(a in pixels(9), b in pixels(7), c in pixels(5)) {
            let whole = matrix(&[a.clone(), b.clone(), c.clone()].concat());
            let (ma, mb, mc) = (matrix(&a), matrix(&b), matrix(&c));
            let mut left = ma.clone();
            left.merge(&mb).unwrap();
            left.merge(&mc).unwrap();
            let mut right = mc.clone();
            right.merge(&mb).unwrap();
            right.merge(&ma).unwrap();
            prop_assert_eq!(&left, &whole);
            prop_assert_eq!(&right, &whole);
        }

        #[test]
        fn fixing_a_wrong_pixel_never_lowers_miou(px in pixels(12)) {
            let before = matrix(&px).metrics();
            for i in 0..px.len() {
                let (p, g) = px[i];
                if g == 255 || p == g {
                    continue;
                }
                let mut fixed = px.clone();
                fixed[i].0 = g;
                let after = matrix(&fixed).metrics();
                prop_assert!(after.miou.unwrap() + 1e-12 >= before.miou.unwrap());
                prop_assert!(after.pacc.unwrap() > before.pacc.unwrap());
            }
            if let Some(m) = before.miou {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}
