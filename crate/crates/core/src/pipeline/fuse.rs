use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::map::{SegmentationMap, MAX_CLASSES};
use crate::preprocess::BinaryMask;

/// Candidate regions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    masks: Vec<BinaryMask>,
    confidences: Option<Vec<f64>>,
    /// `[N, E]` first-branch proposal embeddings.
    embeddings: Option<Tensor<f32>>,
}

impl ProposalSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("proposal set is empty".into()))?;
        if masks.iter().any(|m| !m.same_dims(first)) {
            return Err(Error::Shape("proposal masks differ in size".into()));
        }
        Ok(Self { masks, confidences: None, embeddings: None })
    }

    pub fn with_confidences(mut self, conf: Vec<f64>) -> Result<Self> {
        if conf.len() != self.masks.len() {
            return Err(Error::Shape(format!("{} confidences for {} masks", conf.len(), self.masks.len())));
        }
        if conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("confidences must lie in [0, 1]".into()));
        }
        self.confidences = Some(conf);
        Ok(self)
    }

    pub fn with_embeddings(mut self, emb: Tensor<f32>) -> Result<Self> {
        if emb.shape().len() != 2 || emb.shape()[0] != self.masks.len() {
            return Err(Error::Shape(format!(
                "embeddings {:?} for {} masks",
                emb.shape(),
                self.masks.len()
            )));
        }
        self.embeddings = Some(emb);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn height(&self) -> usize {
        self.masks[0].height()
    }

    pub fn width(&self) -> usize {
        self.masks[0].width()
    }

    /// Confidence of proposal `i`, 1 when none were given.
    pub fn confidence(&self, i: usize) -> f64 {
        self.confidences.as_ref().map_or(1.0, |c| c[i])
    }

    pub fn embeddings(&self) -> Option<&Tensor<f32>> {
        self.embeddings.as_ref()
    }
}

/// Per-pixel weighted vote: pixel x gets `argmax_k Σ_i mask_i(x)·conf_i·dist_i[k]`,
/// lowest class on ties. Pixels no mask covers stay unlabeled.
pub fn fuse(masks: &[&BinaryMask], confidences: &[f64], dists: &[&[f64]], num_classes: usize) -> Result<SegmentationMap> {
    if masks.len() != confidences.len() || masks.len() != dists.len() {
        return Err(Error::Shape(format!(
            "{} masks, {} confidences, {} distributions",
            masks.len(),
            confidences.len(),
            dists.len()
        )));
    }
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("cannot fuse {num_classes} classes")));
    }
    if let Some(d) = dists.iter().find(|d| d.len() != num_classes) {
        return Err(Error::Shape(format!("distribution of {} for {num_classes} classes", d.len())));
    }
    let Some(first) = masks.first() else {
        return Err(Error::NoValidProposals);
    };
    if masks.iter().any(|m| !m.same_dims(first)) {
        return Err(Error::Shape("proposal masks differ in size".into()));
    }
    let (h, w) = (first.height(), first.width());
    let mut scores = vec![0.0f64; h * w * num_classes];
    let mut covered = vec![false; h * w];
    for ((m, &conf), d) in masks.iter().zip(confidences).zip(dists) {
        for (px, &on) in m.data().iter().enumerate() {
            if on {
                covered[px] = true;
                let s = &mut scores[px * num_classes..(px + 1) * num_classes];
                for (acc, &p) in s.iter_mut().zip(d.iter()) {
                    *acc += conf * p;
                }
            }
        }
    }
    let data = (0..h * w)
        .map(|px| {
            if !covered[px] {
                return crate::pipeline::map::UNLABELED;
            }
            crate::classify::argmax(&scores[px * num_classes..(px + 1) * num_classes]) as u8
        })
        .collect();
    SegmentationMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_full_proposal_takes_its_argmax() {
        let m = BinaryMask::full(3, 4);
        let map = fuse(&[&m], &[1.0], &[&[0.1, 0.7, 0.2]], 3).unwrap();
        assert!(map.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn identical_masks_add_linearly() {
        let m = BinaryMask::full(2, 2);
        let d1 = [0.6, 0.4, 0.0];
        let d2 = [0.0, 0.3, 0.5];
        let map = fuse(&[&m, &m], &[1.0, 1.0], &[&d1, &d2], 3).unwrap();
        // d1 + d2 = [0.6, 0.7, 0.5]
        assert!(map.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn uncovered_pixels_are_unlabeled_and_ties_go_low() {
        let m = BinaryMask::from_fn(2, 2, |r, _| r == 0);
        let map = fuse(&[&m], &[1.0], &[&[0.5, 0.5]], 2).unwrap();
        assert_eq!(map.data(), &[0, 0, 255, 255]);
    }

    #[test]
    fn errors() {
        let m = BinaryMask::full(2, 2);
        assert!(fuse(&[&m], &[1.0], &[&[1.0]], 2).is_err());
        assert!(fuse(&[], &[], &[], 2).is_err());
        assert!(ProposalSet::new(vec![]).is_err());
        assert!(ProposalSet::new(vec![m.clone(), BinaryMask::full(3, 2)]).is_err());
        let set = ProposalSet::new(vec![m]).unwrap();
        assert!(set.clone().with_confidences(vec![1.5]).is_err());
        assert!(set.with_embeddings(Tensor::zeros(&[2, 4])).is_err());
    }

    fn brute_force(masks: &[BinaryMask], conf: &[f64], dists: &[Vec<f64>], k: usize) -> Vec<u8> {
        let (h, w) = (masks[0].height(), masks[0].width());
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !masks.iter().any(|m| m.get(r, c)) {
                    out.push(255);
                    continue;
                }
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for class in 0..k {
                    let mut s = 0.0;
                    for i in 0..masks.len() {
                        if masks[i].get(r, c) {
                            s += conf[i] * dists[i][class];
                        }
                    }
                    if s > best_score {
                        best_score = s;
                        best = class;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(600))]
        #[test]
        fn matches_per_pixel_brute_force(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let n = rng.random_range(1..=5);
            let k = rng.random_range(1..=5);
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            let masks: Vec<BinaryMask> = (0..n)
                .map(|_| {
                    let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
                    BinaryMask::new(h, w, bits).unwrap()
                })
                .collect();
            let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            // Coarse values make ties common.
            let dists: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
                .collect();
            let refs: Vec<&BinaryMask> = masks.iter().collect();
            let drefs: Vec<&[f64]> = dists.iter().map(|d| d.as_slice()).collect();
            let got = fuse(&refs, &conf, &drefs, k).unwrap();
            let want = brute_force(&masks, &conf, &dists, k);
            prop_assert_eq!(got.data(), want.as_slice());
        }
    }
}
