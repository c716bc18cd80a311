//! Toy vision-transformer image encoder with mask-prompt insertion, and the
//! frozen text side.
//!
//! Checkpoints are tensor bundles using these names:
//!
//! | name | shape |
//! |------|-------|
//! | `patch_proj.w`, `patch_proj.b` | `[p·p·3, E]`, `[E]` |
//! | `class_token` | `[E]` |
//! | `pos_embed` | `[N_p + 1, E]` |
//! | `layer{i}.ln1.g`, `layer{i}.ln1.b` | `[E]` |
//! | `layer{i}.attn.qkv`, `layer{i}.attn.qkv.b` | `[E, 3E]`, `[3E]` |
//! | `layer{i}.attn.out`, `layer{i}.attn.out.b` | `[E, E]`, `[E]` |
//! | `layer{i}.ln2.g`, `layer{i}.ln2.b` | `[E]` |
//! | `layer{i}.mlp.fc1`, `layer{i}.mlp.fc1.b` | `[E, 4E]`, `[4E]` |
//! | `layer{i}.mlp.fc2`, `layer{i}.mlp.fc2.b` | `[4E, E]`, `[E]` |
//! | `ln_post.g`, `ln_post.b` | `[E]` |
//! | `proj` | `[E, E]` |
//! | `prompt.{d}` (optional, `d < D`) | `[N_p, E]` |
//!
//! The encoder configuration is stored next to the bundle as `encoder.json`.

pub mod forward;
pub mod text;
pub mod weights;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forward::{apply_mask_prompts, backward, forward, layer_inputs, patchify, ForwardCache, GradSink};
pub use text::{embed_text, load_text_table, VocabularyEmbeddings, TEMPLATES};
pub use weights::{EncoderWeights, LayerWeights, PromptStack};

use crate::error::{Error, Result};
use crate::numerics::{AnyTensor, Bundle, Scalar, Tensor};
use crate::exec::map_indexed;
use crate::preprocess::{crop_resize_mask, BinaryMask, CropOptions, ImageTensor, MaskedCrop};

pub const CONFIG_FILE: &str = "encoder.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt_depth: usize,
    pub mlp_ratio: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_size: 4,
            dim: 32,
            layers: 4,
            heads: 4,
            prompt_depth: 3,
            mlp_ratio: 4,
            temperature: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.layers == 0 || self.prompt_depth == 0 || self.prompt_depth > self.layers {
            return bad(format!(
                "prompt depth {} must be in 1..={}",
                self.prompt_depth, self.layers
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn crop_options(&self) -> CropOptions {
        CropOptions::new(self.image_side, self.patch_size)
    }
}

/// Image-encoder weights with optional mask prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<F = f32> {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<F>,
    pub prompts: Option<PromptStack<F>>,
}

impl<F: Scalar> EncoderState<F> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            weights: EncoderWeights::init(&config, seed)?,
            config,
            prompts: None,
        })
    }

    pub fn encode(&self, crop: &MaskedCrop) -> Result<Vec<F>> {
        encode_image(&self.config, &self.weights, self.prompts.as_ref(), crop)
    }

    /// Embeds the masked crop of every mask over `image`. Empty masks give
    /// `None`. Output order follows `masks` regardless of `jobs`.
    pub fn encode_regions(
        &self,
        image: &ImageTensor,
        masks: &[BinaryMask],
        keep_background: bool,
        jobs: usize,
    ) -> Result<Vec<Option<Vec<F>>>> {
        let opts = self.config.crop_options().keep_background(keep_background);
        map_indexed(jobs, masks.len(), |i| {
            if masks[i].is_empty() {
                return Ok(None);
            }
            let crop = crop_resize_mask(image, &masks[i], opts)?;
            self.encode(&crop).map(Some)
        })
    }

    /// Prompts that leave the current model nearly unchanged: layer 0 gets
    /// the token a blank patch already produces, deeper layers the mean
    /// stream value at masked positions over `crops`.
    pub fn neutral_prompts(&self, depth: usize, crops: &[&MaskedCrop]) -> Result<PromptStack<F>> {
        let cfg = &self.config;
        let mut stack = PromptStack::zeros(cfg, depth);
        let (np, e) = (cfg.num_patches(), cfg.dim);
        let bias = self.weights.patch_proj_b.data();
        for row in stack.layers[0].data_mut().chunks_mut(e) {
            row.copy_from_slice(bias);
        }
        for l in 1..depth {
            let partial = PromptStack { layers: stack.layers[..l].to_vec() };
            let mut sums = vec![0.0f64; np * e];
            let mut counts = vec![0usize; np];
            for crop in crops {
                let inputs = forward::layer_inputs(
                    cfg,
                    &self.weights,
                    Some(&partial),
                    crop.pixels.data(),
                    &crop.patch_mask,
                    l + 1,
                )?;
                let x = &inputs[l];
                for (j, _) in crop.patch_mask.iter().enumerate().filter(|(_, keep)| !**keep) {
                    counts[j] += 1;
                    for (acc, v) in sums[j * e..(j + 1) * e].iter_mut().zip(&x[(j + 1) * e..(j + 2) * e]) {
                        *acc += v.as_f64();
                    }
                }
            }
            // Positions never masked in the sample take the overall mean.
            let total: usize = counts.iter().sum();
            let mut overall = vec![0.0f64; e];
            for j in 0..np {
                for (o, v) in overall.iter_mut().zip(&sums[j * e..(j + 1) * e]) {
                    *o += v / total.max(1) as f64;
                }
            }
            let layer = stack.layers[l].data_mut();
            for j in 0..np {
                for c in 0..e {
                    let v = if counts[j] > 0 { sums[j * e + c] / counts[j] as f64 } else { overall[c] };
                    layer[j * e + c] = F::lit(v);
                }
            }
        }
        Ok(stack)
    }

    pub fn cast<G: Scalar>(&self) -> EncoderState<G> {
        EncoderState {
            config: self.config,
            weights: self.weights.cast(),
            prompts: self.prompts.as_ref().map(PromptStack::cast),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()>
    where
        Tensor<F>: Into<AnyTensor>,
    {
        let mut bundle = Bundle::new();
        self.weights.add_to_bundle(&mut bundle);
        if let Some(p) = &self.prompts {
            for (name, t) in p.names().into_iter().zip(&p.layers) {
                bundle.insert(name, t.clone());
            }
        }
        bundle.save(dir)?;
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: EncoderConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        config.validate()?;
        let bundle = Bundle::load(dir)?;
        Ok(Self {
            weights: EncoderWeights::from_bundle(&config, &bundle)?,
            prompts: PromptStack::from_bundle(&config, &bundle)?,
            config,
        })
    }
}

/// Embeds one masked crop; the result has unit norm.
pub fn encode_image<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    crop: &MaskedCrop,
) -> Result<Vec<F>> {
    if crop.side() != config.image_side {
        return Err(Error::Config(format!(
            "crop side {}, encoder expects {}",
            crop.side(),
            config.image_side
        )));
    }
    forward(config, weights, prompts, crop.pixels.data(), &crop.patch_mask).map(|(e, _)| e)
}
