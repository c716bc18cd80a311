use serde::{Deserialize, Serialize};

use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::pipeline::map::{SegmentationMap, UNLABELED};

/// Dataset-level confusion counts. Rows are ground-truth classes, columns
/// predicted classes plus a final "unlabeled" column. Pixels unlabeled in
/// the ground truth are not counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    num_classes: usize,
    confusion: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, confusion: vec![0; num_classes * (num_classes + 1)] }
    }

    pub fn add(&mut self, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{}, ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        let k = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == UNLABELED {
                continue;
            }
            let col = if p == UNLABELED { k } else { p as usize };
            self.confusion[g as usize * (k + 1) + col] += 1;
        }
        Ok(())
    }

    /// Merges counts from another accumulator.
    pub fn merge(&mut self, other: &IouAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("accumulators differ in class count".into()));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    /// `(intersection, union)` for class `k`.
    pub fn counts(&self, k: usize) -> (u64, u64) {
        let n = self.num_classes;
        let inter = self.confusion[k * (n + 1) + k];
        let gt: u64 = self.confusion[k * (n + 1)..(k + 1) * (n + 1)].iter().sum();
        let pred: u64 = (0..n).map(|g| self.confusion[g * (n + 1) + k]).sum();
        (inter, gt + pred - inter)
    }

    /// IoU of class `k`, `None` when it appears in neither map.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let (i, u) = self.counts(k);
        (u > 0).then(|| i as f64 / u as f64)
    }

    pub fn report(&self, vocab: &Vocabulary) -> Result<EvalReport> {
        if vocab.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "vocabulary of {} for {} classes",
                vocab.len(),
                self.num_classes
            )));
        }
        let per_class: Vec<ClassIou> = vocab
            .entries()
            .iter()
            .map(|e| ClassIou { index: e.index, name: e.name.clone(), seen: e.seen, iou: self.iou(e.index) })
            .collect();
        let mean = |filter: &dyn Fn(&ClassIou) -> bool| -> Option<f64> {
            let vals: Vec<f64> = per_class.iter().filter(|c| filter(c)).filter_map(|c| c.iou).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let n = self.num_classes;
        let total: u64 = self.confusion.iter().sum();
        let correct: u64 = (0..n).map(|k| self.confusion[k * (n + 1) + k]).sum();
        Ok(EvalReport {
            miou: mean(&|_| true).unwrap_or(0.0),
            seen_miou: mean(&|c| c.seen),
            unseen_miou: mean(&|c| !c.seen),
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            classes_evaluated: per_class.iter().filter(|c| c.iou.is_some()).count(),
            per_class,
            confusion: self.confusion.chunks(n + 1).map(<[u64]>::to_vec).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub index: usize,
    pub name: String,
    pub seen: bool,
    /// Absent when the class is in neither prediction nor ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over classes with nonzero union; 0 when there are none.
    pub miou: f64,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub pixel_accuracy: f64,
    pub classes_evaluated: usize,
    pub per_class: Vec<ClassIou>,
    /// Ground truth by prediction; the last column counts unlabeled
    /// predictions.
    pub confusion: Vec<Vec<u64>>,
}

/// Evaluates a single prediction against its ground truth.
pub fn miou(pred: &SegmentationMap, gt: &SegmentationMap, vocab: &Vocabulary) -> Result<EvalReport> {
    let mut acc = IouAccumulator::new(vocab.len());
    acc.add(pred, gt)?;
    acc.report(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab(k: usize) -> Vocabulary {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        Vocabulary::from_names(&names).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let m = SegmentationMap::new(2, 2, vec![0, 1, 1, 255]).unwrap();
        let r = miou(&m, &m, &vocab(3)).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.classes_evaluated, 2);
        assert_eq!(r.per_class[2].iou, None);
    }

    #[test]
    fn disjoint_classes_score_zero() {
        let p = SegmentationMap::new(1, 2, vec![0, 0]).unwrap();
        let g = SegmentationMap::new(1, 2, vec![1, 1]).unwrap();
        assert_eq!(miou(&p, &g, &vocab(2)).unwrap().miou, 0.0);
    }

    #[test]
    fn half_overlap_is_one_third() {
        // I = 1, U = 3.
        let p = SegmentationMap::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let g = SegmentationMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let mut acc = IouAccumulator::new(2);
        acc.add(&p, &g).unwrap();
        assert_eq!(acc.counts(0), (1, 3));
        assert_eq!(acc.iou(0), Some(1.0 / 3.0));
    }

    #[test]
    fn unlabeled_ground_truth_is_ignored() {
        let p = SegmentationMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let g = SegmentationMap::new(1, 3, vec![0, 255, 255]).unwrap();
        let r = miou(&p, &g, &vocab(2)).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class[1].iou, None);
    }

    #[test]
    fn seen_split_and_errors() {
        let v = vocab(2).with_seen_list(&["c0".into()]).unwrap();
        let p = SegmentationMap::new(1, 2, vec![0, 0]).unwrap();
        let g = SegmentationMap::new(1, 2, vec![0, 1]).unwrap();
        let r = miou(&p, &g, &v).unwrap();
        assert_eq!(r.seen_miou, Some(0.5));
        assert_eq!(r.unseen_miou, Some(0.0));
        assert_eq!(r.miou, 0.25);
        let small = SegmentationMap::new(1, 1, vec![0]).unwrap();
        assert!(matches!(miou(&small, &g, &v), Err(Error::Shape(_))));
        let bad = SegmentationMap::new(1, 2, vec![0, 5]).unwrap();
        assert!(miou(&bad, &g, &v).is_err());
    }

    proptest! {
        #[test]
        fn swapping_pred_and_gt_keeps_per_class_iou(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let k = rng.random_range(1..5usize);
            let n = rng.random_range(1..30usize);
            let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let a = SegmentationMap::new(1, n, a).unwrap();
            let b = SegmentationMap::new(1, n, b).unwrap();
            let r1 = miou(&a, &b, &vocab(k)).unwrap();
            let r2 = miou(&b, &a, &vocab(k)).unwrap();
            for (x, y) in r1.per_class.iter().zip(&r2.per_class) {
                prop_assert_eq!(x.iou, y.iou);
            }
            prop_assert!((0.0..=1.0).contains(&r1.miou));
        }
    }
}
