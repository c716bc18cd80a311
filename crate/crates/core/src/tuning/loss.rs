use std::collections::BTreeMap;

use crate::encoder::text::{default_templates, embed_text};
use crate::encoder::{backward, forward, EncoderState, EncoderWeights, GradSink, PromptStack};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::numerics::kernels::{dot, softmax_in_place};
use crate::numerics::Scalar;
use crate::preprocess::MaskedCrop;

/// One finetuning example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub crop: MaskedCrop,
    pub noun: String,
}

/// A batch plus its sorted unique-noun vocabulary.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub pairs: Vec<&'a TrainingPair>,
    pub nouns: Vec<String>,
    /// Index of each pair's noun in `nouns`.
    pub targets: Vec<usize>,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: Vec<&'a TrainingPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let mut nouns: Vec<String> = Vec::new();
        for p in &pairs {
            if p.noun.trim().is_empty() {
                return Err(Error::DegenerateBatch("empty noun".into()));
            }
            if !nouns.contains(&p.noun) {
                nouns.push(p.noun.clone());
            }
        }
        nouns.sort();
        if nouns.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "only one unique noun ({})",
                nouns[0]
            )));
        }
        let targets = pairs
            .iter()
            .map(|p| nouns.binary_search(&p.noun).expect("noun collected"))
            .collect();
        Ok(Self {
            pairs,
            nouns,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Memoized frozen noun embeddings.
#[derive(Debug, Clone)]
pub struct TextCache<F> {
    dim: usize,
    templates: Vec<String>,
    table: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> TextCache<F> {
    pub fn new(dim: usize) -> Self {
        Self::with_templates(dim, default_templates())
    }

    pub fn with_templates(dim: usize, templates: Vec<String>) -> Self {
        Self {
            dim,
            templates,
            table: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, noun: &str) -> Result<&[F]> {
        if !self.table.contains_key(noun) {
            let v = embed_text(noun, &self.templates, self.dim)?
                .into_iter()
                .map(F::lit)
                .collect();
            self.table.insert(noun.to_string(), v);
        }
        Ok(&self.table[noun])
    }

    /// Rows for every noun, in order.
    pub fn rows(&mut self, nouns: &[String]) -> Result<Vec<Vec<F>>> {
        nouns.iter().map(|n| self.get(n).map(<[F]>::to_vec)).collect()
    }
}

/// Which parameter sets receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub weights: bool,
    pub prompts: bool,
}

impl GradTargets {
    pub const PROMPTS: Self = Self {
        weights: false,
        prompts: true,
    };
    pub const WEIGHTS: Self = Self {
        weights: true,
        prompts: false,
    };
    pub const BOTH: Self = Self {
        weights: true,
        prompts: true,
    };
    pub const NONE: Self = Self {
        weights: false,
        prompts: false,
    };
}

/// Loss, per-pair probabilities and the requested gradients.
#[derive(Debug, Clone)]
pub struct LossAndGrads<F> {
    pub loss: F,
    /// `B × U` softmax probabilities over the batch vocabulary.
    pub probs: Vec<Vec<F>>,
    pub weight_grads: Option<EncoderWeights<F>>,
    pub prompt_grads: Option<PromptStack<F>>,
}

struct SampleResult<F> {
    loss: F,
    probs: Vec<F>,
    weight_grads: Option<EncoderWeights<F>>,
    prompt_grads: Option<PromptStack<F>>,
}

fn sample_pass<F: Scalar>(
    state: &EncoderState<F>,
    pair: &TrainingPair,
    target: usize,
    text: &[Vec<F>],
    tau: F,
    batch_size: F,
    targets: GradTargets,
) -> Result<SampleResult<F>> {
    let prompts = state.prompts.as_ref();
    let (emb, cache) = forward(
        &state.config,
        &state.weights,
        prompts,
        pair.crop.pixels.data(),
        &pair.crop.patch_mask,
    )?;
    let mut probs: Vec<F> = text.iter().map(|t| dot(&emb, t) / tau).collect();
    softmax_in_place(&mut probs);
    let loss = -probs[target].ln();

    let mut weight_grads = None;
    let mut prompt_grads = None;
    let want_prompts = targets.prompts && prompts.is_some();
    if targets.weights || want_prompts {
        let mut d_emb = vec![F::zero(); emb.len()];
        for (u, t) in text.iter().enumerate() {
            let y = if u == target { F::one() } else { F::zero() };
            let coeff = (probs[u] - y) / (tau * batch_size);
            for (d, &tv) in d_emb.iter_mut().zip(t) {
                *d += coeff * tv;
            }
        }
        let mut gw = targets.weights.then(|| state.weights.zeros_like());
        let mut gp = if want_prompts { prompts.map(PromptStack::zeros_like) } else { None };
        backward(
            &state.config,
            &state.weights,
            prompts,
            &cache,
            &d_emb,
            GradSink {
                weights: gw.as_mut(),
                prompts: gp.as_mut(),
            },
        )?;
        weight_grads = gw;
        prompt_grads = gp;
    }
    Ok(SampleResult {
        loss,
        probs,
        weight_grads,
        prompt_grads,
    })
}

/// Mean cross-entropy of each crop against the batch's unique nouns, with
/// exact gradients for the requested parameter sets. Per-sample gradients
/// are summed in batch order, so the result does not depend on `jobs`.
pub fn loss_and_grads<F: Scalar>(
    state: &EncoderState<F>,
    batch: &PairBatch<'_>,
    text: &[Vec<F>],
    tau: f64,
    targets: GradTargets,
    jobs: usize,
) -> Result<LossAndGrads<F>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if text.len() != batch.nouns.len() {
        return Err(Error::Shape(format!(
            "{} text rows for {} nouns",
            text.len(),
            batch.nouns.len()
        )));
    }
    let tau_f = F::lit(tau);
    let bsz = F::lit(batch.len() as f64);
    let results = map_indexed(jobs, batch.len(), |i| {
        sample_pass(state, batch.pairs[i], batch.targets[i], text, tau_f, bsz, targets)
    })?;

    let mut loss = F::zero();
    let mut probs = Vec::with_capacity(results.len());
    let mut weight_grads: Option<EncoderWeights<F>> = None;
    let mut prompt_grads: Option<PromptStack<F>> = None;
    for r in results {
        loss += r.loss;
        probs.push(r.probs);
        if let Some(g) = r.weight_grads {
            match &mut weight_grads {
                None => weight_grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        if let Some(g) = r.prompt_grads {
            match &mut prompt_grads {
                None => prompt_grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
    }
    Ok(LossAndGrads {
        loss: loss / bsz,
        probs,
        weight_grads,
        prompt_grads,
    })
}

/// Batch loss and per-pair probabilities, text embeddings from the toy
/// embedder.
pub fn pair_loss<F: Scalar>(
    batch: &PairBatch<'_>,
    state: &EncoderState<F>,
    tau: f64,
) -> Result<(F, Vec<Vec<F>>)> {
    let mut cache = TextCache::new(state.config.dim);
    let text = cache.rows(&batch.nouns)?;
    let r = loss_and_grads(state, batch, &text, tau, GradTargets::NONE, 1)?;
    Ok((r.loss, r.probs))
}

/// Gradients of [`pair_loss`] for the requested parameter sets.
pub fn grad_prompts<F: Scalar>(
    batch: &PairBatch<'_>,
    state: &EncoderState<F>,
    tau: f64,
    targets: GradTargets,
) -> Result<LossAndGrads<F>> {
    let mut cache = TextCache::new(state.config.dim);
    let text = cache.rows(&batch.nouns)?;
    loss_and_grads(state, batch, &text, tau, targets, 1)
}
