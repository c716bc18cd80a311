//! Mask-category pairs from captions and proposals.

pub mod lexicon;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lexicon::{extract_nouns, Lexicon};

use crate::dataset::Dataset;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::numerics::kernels::cosine;
use crate::numerics::Scalar;
use crate::preprocess::{crop_resize_mask, BinaryMask, ImageTensor};
use crate::tuning::{TextCache, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Proposals,
    Gt,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::Proposals => "proposals",
            MaskSource::Gt => "gt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CategorySource {
    Captions,
    GtClasses,
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposals" => Ok(MaskSource::Proposals),
            "gt" => Ok(MaskSource::Gt),
            _ => Err(Error::Config(format!("unknown mask source '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCategoryPair {
    pub image_id: String,
    pub proposal_idx: usize,
    pub noun: String,
    pub score: f64,
    pub mask_source: MaskSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineStats {
    pub pairs: usize,
    pub unique_nouns: usize,
}

impl MineStats {
    pub fn of(pairs: &[MaskCategoryPair]) -> Self {
        let nouns: BTreeSet<&str> = pairs.iter().map(|p| p.noun.as_str()).collect();
        Self { pairs: pairs.len(), unique_nouns: nouns.len() }
    }
}

/// For each noun row of `sims` (nouns × proposals), the proposal with the
/// highest similarity and that similarity. `None` entries are skipped;
/// ties go to the lowest proposal index.
pub fn best_matches(sims: &[Vec<Option<f64>>]) -> Result<Vec<(usize, f64)>> {
    sims.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, s) in row.iter().enumerate() {
                if let Some(s) = *s {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
            }
            best.ok_or(Error::NoValidProposals)
        })
        .collect()
}

/// Pairs every noun with its most similar proposal.
pub fn match_embeddings<F: Scalar>(
    image_id: &str,
    proposals: &[Option<Vec<F>>],
    nouns: &[(String, Vec<F>)],
    mask_source: MaskSource,
) -> Result<Vec<MaskCategoryPair>> {
    if !proposals.iter().any(Option::is_some) {
        return Err(Error::NoValidProposals);
    }
    let sims: Vec<Vec<Option<f64>>> = nouns
        .iter()
        .map(|(_, t)| {
            proposals
                .iter()
                .map(|p| p.as_ref().map(|v| cosine(v, t).as_f64()))
                .collect()
        })
        .collect();
    Ok(best_matches(&sims)?
        .into_iter()
        .zip(nouns)
        .map(|((idx, score), (noun, _))| MaskCategoryPair {
            image_id: image_id.to_string(),
            proposal_idx: idx,
            noun: noun.clone(),
            score,
            mask_source,
        })
        .collect())
}

/// Encodes every proposal of one image and pairs each noun with the
/// best-matching one.
pub fn match_pairs<F: Scalar>(
    image_id: &str,
    image: &ImageTensor,
    masks: &[BinaryMask],
    nouns: &[String],
    state: &EncoderState<F>,
    text: &mut TextCache<F>,
) -> Result<Vec<MaskCategoryPair>> {
    let embs = state.encode_regions(image, masks, false, 1)?;
    let rows: Vec<(String, Vec<F>)> = nouns
        .iter()
        .map(|n| text.get(n).map(|t| (n.clone(), t.to_vec())))
        .collect::<Result<_>>()?;
    match_embeddings(image_id, &embs, &rows, MaskSource::Proposals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineOptions {
    pub captions_per_image: usize,
    pub mask_source: MaskSource,
    pub category_source: CategorySource,
    /// Drop pairs scoring below this.
    pub min_score: Option<f64>,
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            captions_per_image: 1,
            mask_source: MaskSource::Proposals,
            category_source: CategorySource::Captions,
            min_score: None,
            jobs: 1,
        }
    }
}

/// The masks of one image under `source`: proposal masks, or one mask per
/// ground-truth class.
pub fn image_masks(ds: &Dataset, id: &str, source: MaskSource) -> Result<Vec<BinaryMask>> {
    match source {
        MaskSource::Proposals => ds.proposals(id),
        MaskSource::Gt => Ok(ds.gt_segments(id)?.into_iter().map(|(_, m)| m).collect()),
    }
}

/// Mines the whole dataset. Output is ordered by image id, then noun order.
pub fn mine_dataset<F: Scalar>(
    ds: &Dataset,
    state: &EncoderState<F>,
    opts: &MineOptions,
) -> Result<(Vec<MaskCategoryPair>, MineStats)> {
    if opts.captions_per_image == 0 {
        return Err(Error::Config("captions per image must be at least 1".into()));
    }
    let ids = ds.ids();
    let captions = match opts.category_source {
        CategorySource::Captions => Some(ds.captions()?),
        CategorySource::GtClasses => None,
    };

    // Nouns per image, then every distinct noun embedded once.
    let mut per_image: Vec<Vec<String>> = Vec::with_capacity(ids.len());
    let mut gt_classes: Vec<Vec<usize>> = Vec::with_capacity(ids.len());
    for id in ids {
        match &captions {
            Some(c) => {
                let mut nouns: Vec<String> = Vec::new();
                for text in c[id].iter().take(opts.captions_per_image) {
                    for n in extract_nouns(text) {
                        if !nouns.contains(&n) {
                            nouns.push(n);
                        }
                    }
                }
                per_image.push(nouns);
                gt_classes.push(Vec::new());
            }
            None => {
                let classes = ds.gt(id)?.classes_present();
                per_image.push(classes.iter().map(|&k| ds.vocab().name(k).to_string()).collect());
                gt_classes.push(classes);
            }
        }
    }
    let mut cache = TextCache::<F>::new(state.config.dim);
    let mut table: BTreeMap<String, Vec<F>> = BTreeMap::new();
    for n in per_image.iter().flatten() {
        if !table.contains_key(n) {
            table.insert(n.clone(), cache.get(n)?.to_vec());
        }
    }

    let direct = opts.mask_source == MaskSource::Gt && opts.category_source == CategorySource::GtClasses;
    let results = map_indexed(opts.jobs, ids.len(), |i| {
        let id = &ids[i];
        if per_image[i].is_empty() {
            return Ok(Vec::new());
        }
        let image = ds.image(id)?;
        let masks = image_masks(ds, id, opts.mask_source)?;
        let embs = state.encode_regions(&image, &masks, false, 1)?;
        let rows: Vec<(String, Vec<F>)> =
            per_image[i].iter().map(|n| (n.clone(), table[n].clone())).collect();
        if direct {
            // Segment j is class gt_classes[i][j]: the pairing is given.
            return rows
                .iter()
                .enumerate()
                .filter_map(|(j, (noun, t))| {
                    embs[j].as_ref().map(|v| {
                        Ok(MaskCategoryPair {
                            image_id: id.clone(),
                            proposal_idx: j,
                            noun: noun.clone(),
                            score: cosine(v, t).as_f64(),
                            mask_source: MaskSource::Gt,
                        })
                    })
                })
                .collect();
        }
        match_embeddings(id, &embs, &rows, opts.mask_source)
    })?;
    let mut pairs: Vec<MaskCategoryPair> = results.into_iter().flatten().collect();
    if let Some(min) = opts.min_score {
        pairs.retain(|p| p.score >= min);
    }
    let stats = MineStats::of(&pairs);
    Ok((pairs, stats))
}

/// Rebuilds the masked crops behind mined pairs.
pub fn training_pairs(
    ds: &Dataset,
    pairs: &[MaskCategoryPair],
    side: usize,
    patch_size: usize,
    keep_background: bool,
) -> Result<Vec<TrainingPair>> {
    let opts = crate::preprocess::CropOptions::new(side, patch_size).keep_background(keep_background);
    let mut out = Vec::with_capacity(pairs.len());
    let mut current: Option<(String, MaskSource, ImageTensor, Vec<BinaryMask>)> = None;
    for p in pairs {
        let fresh = !matches!(&current, Some((id, src, _, _)) if *id == p.image_id && *src == p.mask_source);
        if fresh {
            let image = ds.image(&p.image_id)?;
            let masks = image_masks(ds, &p.image_id, p.mask_source)?;
            current = Some((p.image_id.clone(), p.mask_source, image, masks));
        }
        let (_, _, image, masks) = current.as_ref().expect("loaded");
        let mask = masks.get(p.proposal_idx).ok_or_else(|| {
            Error::IdMismatch(format!("{} has no mask {}", p.image_id, p.proposal_idx))
        })?;
        out.push(TrainingPair {
            crop: crop_resize_mask(image, mask, opts)?,
            noun: p.noun.clone(),
        });
    }
    Ok(out)
}
