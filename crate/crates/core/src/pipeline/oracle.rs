//! Bottleneck analyses: ground-truth masks with a real classifier, and real
//! proposals with ground-truth labels.

use crate::classify::class_probs;
use crate::dataset::{segments_of, Dataset, Vocabulary};
use crate::encoder::{EncoderState, VocabularyEmbeddings};
use crate::error::Result;
use crate::numerics::Scalar;
use crate::pipeline::eval::{EvalReport, IouAccumulator};
use crate::pipeline::fuse::fuse;
use crate::pipeline::map::SegmentationMap;
use crate::preprocess::{BinaryMask, ImageTensor};

/// Anything that turns masked regions into class distributions.
pub trait MaskClassifier: Sync {
    fn num_classes(&self) -> usize;

    /// One distribution per mask, in order.
    fn classify(&self, image: &ImageTensor, masks: &[BinaryMask]) -> Result<Vec<Vec<f64>>>;
}

/// The mask-adapted encoder followed by cosine similarity to the text table.
pub struct EncoderClassifier<'a, F: Scalar> {
    pub state: &'a EncoderState<F>,
    pub vocab: &'a VocabularyEmbeddings<F>,
    pub tau: f64,
    pub keep_background: bool,
    pub jobs: usize,
}

impl<F: Scalar> MaskClassifier for EncoderClassifier<'_, F> {
    fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    fn classify(&self, image: &ImageTensor, masks: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
        let k = self.vocab.len();
        self.state
            .encode_regions(image, masks, self.keep_background, self.jobs)?
            .into_iter()
            .map(|e| match e {
                Some(v) => class_probs(&v, self.vocab, self.tau).map(|d| d.probs),
                None => Ok(vec![0.0; k]),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OracleSample {
    pub image: ImageTensor,
    pub gt: SegmentationMap,
    pub proposals: Vec<BinaryMask>,
}

impl OracleSample {
    pub fn load(ds: &Dataset, id: &str) -> Result<Self> {
        Ok(Self { image: ds.image(id)?, gt: ds.gt(id)?, proposals: ds.proposals(id)? })
    }
}

/// Classifies every ground-truth segment, fuses and evaluates.
pub fn oracle_mask_analysis(
    samples: &[OracleSample],
    classifier: &dyn MaskClassifier,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let k = vocab.len();
    let mut acc = IouAccumulator::new(k);
    for s in samples {
        let masks: Vec<BinaryMask> = segments_of(&s.gt).into_iter().map(|(_, m)| m).collect();
        let pred = if masks.is_empty() {
            SegmentationMap::unlabeled(s.gt.height(), s.gt.width())
        } else {
            let dists = classifier.classify(&s.image, &masks)?;
            fuse_all(&masks, &dists, k)?
        };
        acc.add(&pred, &s.gt)?;
    }
    acc.report(vocab)
}

/// Ground-truth class with the highest IoU against `mask`, lowest index on
/// ties. `None` when the mask overlaps no segment.
pub fn label_by_overlap(mask: &BinaryMask, segments: &[(usize, BinaryMask)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (class, seg) in segments {
        let iou = mask.iou(seg);
        if iou > 0.0 && best.is_none_or(|(bc, b)| iou > b || (iou == b && *class < bc)) {
            best = Some((*class, iou));
        }
    }
    best.map(|(c, _)| c)
}

/// Labels each proposal with its best-overlapping ground-truth class, fuses
/// one-hot votes and evaluates.
pub fn oracle_class_analysis(samples: &[OracleSample], vocab: &Vocabulary) -> Result<EvalReport> {
    let k = vocab.len();
    let mut acc = IouAccumulator::new(k);
    for s in samples {
        let segments = segments_of(&s.gt);
        let mut masks = Vec::new();
        let mut dists = Vec::new();
        for m in &s.proposals {
            if let Some(c) = label_by_overlap(m, &segments) {
                let mut d = vec![0.0; k];
                d[c] = 1.0;
                masks.push(m.clone());
                dists.push(d);
            }
        }
        let pred = if masks.is_empty() {
            SegmentationMap::unlabeled(s.gt.height(), s.gt.width())
        } else {
            fuse_all(&masks, &dists, k)?
        };
        acc.add(&pred, &s.gt)?;
    }
    acc.report(vocab)
}

fn fuse_all(masks: &[BinaryMask], dists: &[Vec<f64>], k: usize) -> Result<SegmentationMap> {
    let refs: Vec<&BinaryMask> = masks.iter().collect();
    let drefs: Vec<&[f64]> = dists.iter().map(Vec::as_slice).collect();
    fuse(&refs, &vec![1.0; masks.len()], &drefs, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl MaskClassifier for Fixed {
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn classify(&self, _: &ImageTensor, masks: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); masks.len()])
        }
    }

    fn sample() -> OracleSample {
        let gt = SegmentationMap::new(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        OracleSample {
            image: ImageTensor::zeros(2, 4),
            proposals: segments_of(&gt).into_iter().map(|(_, m)| m).collect(),
            gt,
        }
    }

    #[test]
    fn gt_proposals_give_perfect_class_oracle() {
        let v = Vocabulary::from_names(&["a", "b", "c"]).unwrap();
        let r = oracle_class_analysis(&[sample()], &v).unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn constant_classifier_is_worse_than_class_oracle() {
        let v = Vocabulary::from_names(&["a", "b"]).unwrap();
        let r = oracle_mask_analysis(&[sample()], &Fixed(vec![0.9, 0.1]), &v).unwrap();
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn proposals_missing_a_class() {
        let v = Vocabulary::from_names(&["a", "b"]).unwrap();
        let mut s = sample();
        s.proposals.truncate(1);
        let r = oracle_class_analysis(&[s], &v).unwrap();
        assert_eq!(r.per_class[1].iou, Some(0.0));
        assert_eq!(r.per_class[0].iou, Some(1.0));
    }

    #[test]
    fn overlap_labeling() {
        let segs = vec![(3, BinaryMask::from_fn(2, 2, |r, _| r == 0)), (1, BinaryMask::from_fn(2, 2, |r, _| r == 1))];
        assert_eq!(label_by_overlap(&BinaryMask::full(2, 2), &segs), Some(1));
        assert_eq!(label_by_overlap(&BinaryMask::from_fn(2, 2, |r, c| r == 0 && c == 0), &segs), Some(3));
        assert_eq!(label_by_overlap(&BinaryMask::empty(2, 2), &segs), None);
    }
}
