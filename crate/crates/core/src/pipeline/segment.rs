use serde::{Deserialize, Serialize};

use crate::classify::{class_probs, class_probs_with_no_object, ensemble, ClassDistribution, EnsembleConfig};
use crate::encoder::{EncoderState, VocabularyEmbeddings};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::pipeline::fuse::{fuse, ProposalSet};
use crate::pipeline::map::SegmentationMap;
use crate::preprocess::{BinaryMask, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub lambda: f64,
    pub tau: f64,
    pub keep_background: bool,
    /// Proposals below this confidence are skipped. Off by default.
    pub min_confidence: Option<f64>,
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { lambda: 0.7, tau: 0.01, keep_background: false, min_confidence: None, jobs: 1 }
    }
}

impl SegmentOptions {
    pub fn validate(&self) -> Result<()> {
        EnsembleConfig::new(self.lambda)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("min confidence {c} outside [0, 1]")));
            }
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why a proposal took no part in fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skip {
    EmptyMask,
    NoObject,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPrediction {
    pub index: usize,
    pub confidence: f64,
    /// First-branch distribution, absent without proposal embeddings.
    pub branch1: Option<ClassDistribution>,
    pub branch2: Option<ClassDistribution>,
    pub combined: Option<ClassDistribution>,
    pub skipped: Option<Skip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutput {
    pub map: SegmentationMap,
    pub predictions: Vec<ProposalPrediction>,
    /// λ actually applied.
    pub lambda: f64,
    pub degradations: Vec<String>,
}

pub const FORCED_LAMBDA: &str = "no proposal embeddings: lambda forced to 1";

/// Two-branch classification of every proposal followed by fusion.
///
/// When the vocabulary carries a no-object embedding, branch 1 scores it as
/// an extra slot and branch 2 fills that slot with `1/(K+1)`. Proposals whose
/// branch-1 argmax is no-object are dropped, unless λ = 1 where branch 1
/// plays no part at all.
pub fn segment<F: Scalar>(
    image: &ImageTensor,
    proposals: &ProposalSet,
    vocab: &VocabularyEmbeddings<F>,
    state: &EncoderState<F>,
    opts: &SegmentOptions,
) -> Result<SegmentOutput> {
    opts.validate()?;
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("vocabulary is empty".into()));
    }
    if proposals.height() != image.height() || proposals.width() != image.width() {
        return Err(Error::Shape(format!(
            "proposals {}x{} for image {}x{}",
            proposals.height(),
            proposals.width(),
            image.height(),
            image.width()
        )));
    }
    let mut degradations = Vec::new();
    let lambda = if proposals.embeddings().is_none() && opts.lambda < 1.0 {
        degradations.push(FORCED_LAMBDA.to_string());
        1.0
    } else {
        opts.lambda
    };
    let k = vocab.len();
    let embeddings = state.encode_regions(image, proposals.masks(), opts.keep_background, opts.jobs)?;
    if embeddings.iter().all(Option::is_none) {
        return Err(Error::NoValidProposals);
    }

    let mut predictions = Vec::with_capacity(proposals.len());
    for (i, emb) in embeddings.iter().enumerate() {
        let confidence = proposals.confidence(i);
        let mut pred = ProposalPrediction {
            index: i,
            confidence,
            branch1: None,
            branch2: None,
            combined: None,
            skipped: None,
        };
        let Some(emb) = emb else {
            pred.skipped = Some(Skip::EmptyMask);
            predictions.push(pred);
            continue;
        };
        let mut p_hat = class_probs(emb, vocab, opts.tau)?;
        let branch1 = match proposals.embeddings() {
            Some(t) => {
                let v: Vec<F> = t.row(i).iter().map(|&x| F::lit(x as f64)).collect();
                Some(if vocab.no_object().is_some() {
                    class_probs_with_no_object(&v, vocab, opts.tau)?
                } else {
                    class_probs(&v, vocab, opts.tau)?
                })
            }
            None => None,
        };
        let combined = match &branch1 {
            Some(p) => {
                if p.has_no_object {
                    p_hat.probs.push(1.0 / (k + 1) as f64);
                    p_hat.has_no_object = true;
                }
                ensemble(p, &p_hat, lambda)?
            }
            None => p_hat.clone(),
        };
        if lambda < 1.0 && branch1.as_ref().is_some_and(ClassDistribution::is_no_object_argmax) {
            pred.skipped = Some(Skip::NoObject);
        } else if opts.min_confidence.is_some_and(|c| confidence < c) {
            pred.skipped = Some(Skip::LowConfidence);
        }
        pred.branch1 = branch1;
        pred.branch2 = Some(p_hat);
        pred.combined = Some(combined);
        predictions.push(pred);
    }

    let kept: Vec<&ProposalPrediction> = predictions.iter().filter(|p| p.skipped.is_none()).collect();
    let map = if kept.is_empty() {
        SegmentationMap::unlabeled(image.height(), image.width())
    } else {
        let masks: Vec<&BinaryMask> = kept.iter().map(|p| &proposals.masks()[p.index]).collect();
        let conf: Vec<f64> = kept.iter().map(|p| p.confidence).collect();
        let dists: Vec<&[f64]> = kept
            .iter()
            .map(|p| p.combined.as_ref().expect("kept proposals are scored").class_scores())
            .collect();
        fuse(&masks, &conf, &dists, k)?
    };
    Ok(SegmentOutput { map, predictions, lambda, degradations })
}
