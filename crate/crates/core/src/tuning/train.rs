use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grads, GradTargets, PairBatch, TextCache, TrainingPair};
use super::optim::{cosine_lr, AdamW};
use crate::classify::argmax;
use crate::encoder::{EncoderState, PromptStack};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::numerics::kernels::dot;
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Mpt,
    Ft,
    FtThenMpt,
    MptThenFt,
    #[serde(rename = "simul")]
    Simultaneous,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Mpt,
        TrainMode::Ft,
        TrainMode::FtThenMpt,
        TrainMode::MptThenFt,
        TrainMode::Simultaneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Mpt => "mpt",
            TrainMode::Ft => "ft",
            TrainMode::FtThenMpt => "ft-then-mpt",
            TrainMode::MptThenFt => "mpt-then-ft",
            TrainMode::Simultaneous => "simul",
        }
    }

    /// Whether the mode ever trains mask prompts.
    pub fn uses_prompts(self) -> bool {
        self != TrainMode::Ft
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode '{s}'")))
    }
}

/// How a prompt-tuning phase starts its prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    /// Small uniform noise.
    Random,
    /// Close to a no-op on the incoming model; see
    /// [`EncoderState::neutral_prompts`].
    #[default]
    Neutral,
}

/// Crops sampled to estimate neutral prompts.
const NEUTRAL_SAMPLE: usize = 256;

/// Optimizer settings for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Prompt group.
    pub mpt: GroupHyper,
    /// Encoder-weight group.
    pub ft: GroupHyper,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt_depth: usize,
    /// Defaults to the encoder's temperature.
    pub temperature: Option<f64>,
    #[serde(default)]
    pub prompt_init: PromptInit,
    #[serde(skip)]
    pub jobs: usize,
}

impl TrainConfig {
    /// Full-scale settings: large batch, tiny FT learning rate. Far too slow
    /// to converge on the toy encoder.
    pub fn paper(mode: TrainMode) -> Self {
        Self {
            mode,
            mpt: GroupHyper { lr: 2e-2, weight_decay: 0.0, epochs: 5 },
            ft: GroupHyper { lr: 5e-6, weight_decay: 0.2, epochs: 5 },
            batch_size: 256,
            seed: 0,
            prompt_depth: 3,
            temperature: None,
            prompt_init: PromptInit::Random,
            jobs: 1,
        }
    }

    /// Settings that converge within a few minutes on the toy encoder.
    pub fn desk(mode: TrainMode) -> Self {
        Self {
            mode,
            mpt: GroupHyper { lr: 1e-2, weight_decay: 0.0, epochs: 4 },
            ft: GroupHyper { lr: 1e-3, weight_decay: 0.01, epochs: 4 },
            batch_size: 32,
            seed: 0,
            prompt_depth: 3,
            // The toy encoder collapses to the mean text direction at 0.01.
            temperature: Some(0.1),
            prompt_init: PromptInit::Neutral,
            jobs: 1,
        }
    }

    pub fn preset(name: &str, mode: TrainMode) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(mode)),
            "desk" => Ok(Self::desk(mode)),
            _ => Err(Error::Config(format!("unknown preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, g) in [("mpt", &self.mpt), ("ft", &self.ft)] {
            if !(g.lr > 0.0) || !g.lr.is_finite() {
                return bad(format!("{name} learning rate must be positive"));
            }
            if !(g.weight_decay >= 0.0) {
                return bad(format!("{name} weight decay must be non-negative"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.prompt_depth == 0 {
            return bad("prompt depth must be positive".into());
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return bad(format!("temperature {t} must be positive"));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    /// Within-batch top-1 accuracy on the training pairs.
    pub top1: f64,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub state: EncoderState<F>,
    pub log: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    name: &'static str,
    targets: GradTargets,
    epochs: usize,
    fresh_prompts: bool,
}

fn phases(config: &TrainConfig) -> Vec<Phase> {
    let mpt = |name| Phase {
        name,
        targets: GradTargets::PROMPTS,
        epochs: config.mpt.epochs,
        fresh_prompts: true,
    };
    let ft = Phase {
        name: "ft",
        targets: GradTargets::WEIGHTS,
        epochs: config.ft.epochs,
        fresh_prompts: false,
    };
    match config.mode {
        TrainMode::Mpt => vec![mpt("mpt")],
        TrainMode::Ft => vec![ft],
        TrainMode::FtThenMpt => vec![ft, mpt("mpt")],
        TrainMode::MptThenFt => vec![mpt("mpt"), ft],
        TrainMode::Simultaneous => vec![Phase {
            name: "simul",
            targets: GradTargets::BOTH,
            epochs: config.mpt.epochs.max(config.ft.epochs),
            fresh_prompts: true,
        }],
    }
}

/// Finetunes `init` on `dataset` following `config.mode`.
pub fn train<F: Scalar>(
    dataset: &[TrainingPair],
    config: &TrainConfig,
    init: EncoderState<F>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.mode.uses_prompts() && config.prompt_depth > init.config.layers {
        return Err(Error::Config(format!(
            "prompt depth {} exceeds {} layers",
            config.prompt_depth, init.config.layers
        )));
    }
    let tau = config.temperature.unwrap_or(init.config.temperature);
    let mut state = init;
    let mut text = TextCache::<F>::new(state.config.dim);
    let mut log = Vec::new();
    for (pi, phase) in phases(config).into_iter().enumerate() {
        if phase.epochs == 0 {
            continue;
        }
        if phase.fresh_prompts {
            state.config.prompt_depth = config.prompt_depth;
            let seed = derive_seed(config.seed, &format!("prompts.{pi}"));
            state.prompts = Some(match config.prompt_init {
                PromptInit::Random => PromptStack::init(&state.config, config.prompt_depth, seed)?,
                PromptInit::Neutral => {
                    state.prompts = None;
                    let mut order: Vec<usize> = (0..dataset.len()).collect();
                    order.shuffle(&mut seeded(seed));
                    let crops: Vec<_> = order.iter().take(NEUTRAL_SAMPLE).map(|&i| &dataset[i].crop).collect();
                    state.neutral_prompts(config.prompt_depth, &crops)?
                }
            });
        }
        let seed = derive_seed(config.seed, &format!("shuffle.{pi}"));
        run_phase(&mut state, dataset, config, phase, tau, seed, &mut text, &mut log)?;
    }
    Ok(TrainOutcome { state, log })
}

#[allow(clippy::too_many_arguments)]
fn run_phase<F: Scalar>(
    state: &mut EncoderState<F>,
    dataset: &[TrainingPair],
    config: &TrainConfig,
    phase: Phase,
    tau: f64,
    seed: u64,
    text: &mut TextCache<F>,
    log: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let targets = phase.targets;
    let mut opt_w = targets
        .weights
        .then(|| AdamW::new(&state.weights.tensors(), config.ft.weight_decay));
    let mut opt_p = match (&state.prompts, targets.prompts) {
        (Some(p), true) => Some(AdamW::new(&p.layers.iter().collect::<Vec<_>>(), config.mpt.weight_decay)),
        _ => None,
    };
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total = phase.epochs * steps_per_epoch;
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..phase.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let t = step;
            step += 1;
            let batch = match PairBatch::new(chunk.iter().map(|&i| &dataset[i]).collect()) {
                Ok(b) => b,
                Err(Error::DegenerateBatch(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let rows = text.rows(&batch.nouns)?;
            let r = loss_and_grads(state, &batch, &rows, tau, targets, config.jobs)?;
            loss_sum += r.loss.as_f64();
            batches += 1;
            for (p, &tgt) in r.probs.iter().zip(&batch.targets) {
                let p64: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
                correct += usize::from(argmax(&p64) == tgt);
                seen += 1;
            }
            if let (Some(opt), Some(g)) = (opt_w.as_mut(), r.weight_grads.as_ref()) {
                let lr = cosine_lr(config.ft.lr, t, total);
                opt.step(state.weights.tensors_mut(), &g.tensors(), lr);
            }
            if let (Some(opt), Some(g), Some(p)) =
                (opt_p.as_mut(), r.prompt_grads.as_ref(), state.prompts.as_mut())
            {
                let lr = cosine_lr(config.mpt.lr, t, total);
                let grads: Vec<&Tensor<F>> = g.layers.iter().collect();
                opt.step(p.layers.iter_mut().collect(), &grads, lr);
            }
        }
        if batches == 0 {
            return Err(Error::DegenerateBatch(
                "every batch in the epoch has a single noun".into(),
            ));
        }
        log.push(EpochMetrics {
            phase: phase.name.to_string(),
            epoch,
            loss: loss_sum / batches as f64,
            top1: correct as f64 / seen as f64,
            skipped_batches: skipped,
        });
    }
    Ok(())
}

/// Fraction of pairs whose crop is closest to its own noun among
/// `class_names`. Pairs whose noun is outside `class_names` count as wrong.
pub fn evaluate_top1<F: Scalar>(
    state: &EncoderState<F>,
    pairs: &[TrainingPair],
    class_names: &[String],
    jobs: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut text = TextCache::<F>::new(state.config.dim);
    let rows = text.rows(class_names)?;
    let hits = map_indexed(jobs, pairs.len(), |i| {
        let emb = state.encode(&pairs[i].crop)?;
        let sims: Vec<f64> = rows.iter().map(|t| dot(&emb, t).as_f64()).collect();
        Ok(!sims.is_empty() && class_names[argmax(&sims)] == pairs[i].noun)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64)
}
