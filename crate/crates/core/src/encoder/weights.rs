use rand::Rng as _;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::rng::{fnv1a64, seeded};
use crate::numerics::{Bundle, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F = f32> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    /// `E × 3E`, columns laid out as `[q | k | v]`.
    pub qkv: Tensor<F>,
    pub qkv_b: Tensor<F>,
    pub attn_out: Tensor<F>,
    pub attn_out_b: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub fc1: Tensor<F>,
    pub fc1_b: Tensor<F>,
    pub fc2: Tensor<F>,
    pub fc2_b: Tensor<F>,
}

/// Every learnable tensor of the image encoder except the prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<F = f32> {
    pub patch_proj: Tensor<F>,
    pub patch_proj_b: Tensor<F>,
    pub class_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub ln_post_g: Tensor<F>,
    pub ln_post_b: Tensor<F>,
    pub proj: Tensor<F>,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1.g",
    "ln1.b",
    "attn.qkv",
    "attn.qkv.b",
    "attn.out",
    "attn.out.b",
    "ln2.g",
    "ln2.b",
    "mlp.fc1",
    "mlp.fc1.b",
    "mlp.fc2",
    "mlp.fc2.b",
];

impl<F: Scalar> LayerWeights<F> {
    fn tensors(&self) -> [&Tensor<F>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.qkv,
            &self.qkv_b,
            &self.attn_out,
            &self.attn_out_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.fc1,
            &self.fc1_b,
            &self.fc2,
            &self.fc2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.qkv,
            &mut self.qkv_b,
            &mut self.attn_out,
            &mut self.attn_out_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc1,
            &mut self.fc1_b,
            &mut self.fc2,
            &mut self.fc2_b,
        ]
    }
}

impl<F: Scalar> EncoderWeights<F> {
    /// Seeded random initialization.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let e = config.dim;
        let hidden = config.mlp_hidden();
        let fan_in = config.patch_features();
        let n = config.num_patches() + 1;
        let std = |fan: usize| 1.0 / (fan as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_g: Tensor::full(&[e], F::one()),
                ln1_b: Tensor::zeros(&[e]),
                qkv: Tensor::randn(&[e, 3 * e], std(e), &mut rng),
                qkv_b: Tensor::zeros(&[3 * e]),
                attn_out: Tensor::randn(&[e, e], std(e) / (2.0 * config.layers as f64).sqrt(), &mut rng),
                attn_out_b: Tensor::zeros(&[e]),
                ln2_g: Tensor::full(&[e], F::one()),
                ln2_b: Tensor::zeros(&[e]),
                fc1: Tensor::randn(&[e, hidden], std(e), &mut rng),
                fc1_b: Tensor::zeros(&[hidden]),
                fc2: Tensor::randn(&[hidden, e], std(hidden) / (2.0 * config.layers as f64).sqrt(), &mut rng),
                fc2_b: Tensor::zeros(&[e]),
            })
            .collect();
        Ok(Self {
            patch_proj: Tensor::randn(&[fan_in, e], std(fan_in), &mut rng),
            patch_proj_b: Tensor::zeros(&[e]),
            class_token: Tensor::randn(&[e], std(e), &mut rng),
            pos_embed: Tensor::randn(&[n, e], std(e), &mut rng),
            layers,
            ln_post_g: Tensor::full(&[e], F::one()),
            ln_post_b: Tensor::zeros(&[e]),
            proj: Tensor::randn(&[e, e], std(e), &mut rng),
        })
    }

    /// Same shapes, all zeros. Used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["patch_proj.w", "patch_proj.b", "class_token", "pos_embed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.layers.len() {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layer{i}.{f}")));
        }
        names.extend(["ln_post.g", "ln_post.b", "proj"].iter().map(|s| s.to_string()));
        names
    }

    /// All tensors in canonical order (matches [`Self::names`]).
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut v = vec![
            &self.patch_proj,
            &self.patch_proj_b,
            &self.class_token,
            &self.pos_embed,
        ];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.extend([&self.ln_post_g, &self.ln_post_b, &self.proj]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v = vec![
            &mut self.patch_proj,
            &mut self.patch_proj_b,
            &mut self.class_token,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.extend([&mut self.ln_post_g, &mut self.ln_post_b, &mut self.proj]);
        v
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let idx = self.names().iter().position(|n| n == name)?;
        self.tensors_mut().into_iter().nth(idx)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> EncoderWeights<G> {
        EncoderWeights {
            patch_proj: self.patch_proj.cast(),
            patch_proj_b: self.patch_proj_b.cast(),
            class_token: self.class_token.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    qkv: l.qkv.cast(),
                    qkv_b: l.qkv_b.cast(),
                    attn_out: l.attn_out.cast(),
                    attn_out_b: l.attn_out_b.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    fc1: l.fc1.cast(),
                    fc1_b: l.fc1_b.cast(),
                    fc2: l.fc2.cast(),
                    fc2_b: l.fc2_b.cast(),
                })
                .collect(),
            ln_post_g: self.ln_post_g.cast(),
            ln_post_b: self.ln_post_b.cast(),
            proj: self.proj.cast(),
        }
    }

    /// Content hash over names and raw bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.names().iter().zip(self.tensors()) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend(t.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn add_to_bundle(&self, bundle: &mut Bundle)
    where
        Tensor<F>: Into<crate::numerics::AnyTensor>,
    {
        for (name, t) in self.names().into_iter().zip(self.tensors()) {
            bundle.insert(name, t.clone());
        }
    }

    /// Reads weights for `config` from a bundle, checking every shape.
    pub fn from_bundle(config: &EncoderConfig, bundle: &Bundle) -> Result<Self> {
        let mut weights = Self::init(config, 0)?;
        let names = weights.names();
        for (name, slot) in names.iter().zip(weights.tensors_mut()) {
            let t: Tensor<F> = bundle.require(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "{name}: bundle shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(weights)
    }
}

/// Learnable mask prompts, one `N_p × E` tensor per prompted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStack<F = f32> {
    pub layers: Vec<Tensor<F>>,
}

pub const PROMPT_INIT_RANGE: f64 = 0.02;

impl<F: Scalar> PromptStack<F> {
    /// Uniform(−0.02, 0.02) initialization for `depth` layers.
    pub fn init(config: &EncoderConfig, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 || depth > config.layers {
            return Err(Error::Config(format!(
                "prompt depth {depth} must be in 1..={}",
                config.layers
            )));
        }
        let mut rng = seeded(seed);
        let shape = [config.num_patches(), config.dim];
        let layers = (0..depth)
            .map(|_| {
                let data = (0..shape[0] * shape[1])
                    .map(|_| F::lit(rng.random_range(-PROMPT_INIT_RANGE..PROMPT_INIT_RANGE)))
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("sized")
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(config: &EncoderConfig, depth: usize) -> Self {
        Self {
            layers: (0..depth)
                .map(|_| Tensor::zeros(&[config.num_patches(), config.dim]))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|d| format!("prompt.{d}")).collect()
    }

    pub fn cast<G: Scalar>(&self) -> PromptStack<G> {
        PromptStack {
            layers: self.layers.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.layers {
            bytes.extend(t.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() > config.layers {
            return Err(Error::Config(format!(
                "prompt depth {} must be in 1..={}",
                self.layers.len(),
                config.layers
            )));
        }
        for t in &self.layers {
            if t.shape() != [config.num_patches(), config.dim] {
                return Err(Error::Shape(format!(
                    "prompt shape {:?}, expected [{}, {}]",
                    t.shape(),
                    config.num_patches(),
                    config.dim
                )));
            }
        }
        Ok(())
    }

    /// Reads `prompt.0 .. prompt.{D-1}` from a bundle; `None` if absent.
    pub fn from_bundle(config: &EncoderConfig, bundle: &Bundle) -> Result<Option<Self>> {
        let mut layers = Vec::new();
        while let Some(t) = bundle.get(&format!("prompt.{}", layers.len())) {
            layers.push(t.cast());
        }
        if layers.is_empty() {
            return Ok(None);
        }
        let stack = Self { layers };
        stack.validate(config)?;
        Ok(Some(stack))
    }
}
