//! Baseline encoder: full finetuning from random weights on whole-object
//! photos that contain no blank regions.

use serde::{Deserialize, Serialize};

use super::loss::TrainingPair;
use super::train::{train, TrainConfig, TrainMode, TrainOutcome};
use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::Scalar;
use crate::pipeline::synth::render_object;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub images: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { images: 2000, epochs: 6, lr: 1e-3, batch_size: 32, temperature: 0.1, seed: 0, jobs: 1 }
    }
}

impl PretrainConfig {
    fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::desk(TrainMode::Ft);
        c.ft.lr = self.lr;
        c.ft.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.temperature = Some(self.temperature);
        c.seed = self.seed;
        c.jobs = self.jobs;
        c
    }
}

/// The object photos used for pretraining.
pub fn natural_images(seed: u64, count: usize, encoder_side_patch: (usize, usize)) -> Vec<TrainingPair> {
    (0..count).map(|i| render_object(seed, i, encoder_side_patch.0, encoder_side_patch.1)).collect()
}

pub fn pretrain<F: Scalar>(encoder: EncoderConfig, config: &PretrainConfig) -> Result<TrainOutcome<F>> {
    if config.images == 0 {
        return Err(Error::Config("pretraining needs at least one image".into()));
    }
    let init = EncoderState::init(encoder, derive_seed(config.seed, "encoder"))?;
    let data = natural_images(derive_seed(config.seed, "objects"), config.images, (encoder.image_side, encoder.patch_size));
    train(&data, &config.train_config(), init)
}
