//! Frozen text side: a deterministic toy embedder and precomputed tables.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::kernels::l2_normalize_slice;
use crate::numerics::rng::{fnv1a64, seeded};
use crate::numerics::{Bundle, Scalar, Tensor};

/// The fourteen prompt templates averaged per class.
pub const TEMPLATES: [&str; 14] = [
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
];

pub fn default_templates() -> Vec<String> {
    TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn text_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Fixed pseudo-random vector for a token, a pure function of its bytes.
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = seeded(fnv1a64(token.as_bytes()));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Mean-pooled token vectors of one sentence, unit-normalized.
pub fn embed_sentence(text: &str, dim: usize) -> Result<Vec<f64>> {
    let tokens = text_tokens(text);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("no tokens in {text:?}")));
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, v) in acc.iter_mut().zip(token_vector(t, dim)) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    l2_normalize_slice(&acc)
}

/// Embeds a class name: every template instantiated and embedded, the
/// results averaged and unit-normalized.
pub fn embed_text(class_name: &str, templates: &[String], dim: usize) -> Result<Vec<f64>> {
    let name = class_name.trim();
    if name.is_empty() {
        return Err(Error::EmptyClassName);
    }
    if templates.is_empty() {
        return Err(Error::InvalidArgument("at least one template required".into()));
    }
    let mut acc = vec![0.0; dim];
    for tpl in templates {
        let sentence = tpl.replace("{}", name);
        for (a, v) in acc.iter_mut().zip(embed_sentence(&sentence, dim)?) {
            *a += v;
        }
    }
    l2_normalize_slice(&acc)
}

/// Frozen per-class text embeddings plus the optional no-object slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyEmbeddings<F = f32> {
    names: Vec<String>,
    /// `K × E`, unit rows.
    table: Tensor<F>,
    no_object: Option<Vec<F>>,
}

impl<F: Scalar> VocabularyEmbeddings<F> {
    /// Builds a vocabulary from explicit vectors, normalizing each.
    pub fn from_vectors(names: Vec<String>, vectors: &[Vec<F>]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("vocabulary needs at least one class".into()));
        }
        if names.len() != vectors.len() {
            return Err(Error::Shape(format!(
                "{} names, {} vectors",
                names.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        let mut data = Vec::with_capacity(names.len() * dim);
        for (name, v) in names.iter().zip(vectors) {
            if name.trim().is_empty() {
                return Err(Error::EmptyClassName);
            }
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "{name}: vector length {}, expected {dim}",
                    v.len()
                )));
            }
            data.extend(l2_normalize_slice(v)?);
        }
        Ok(Self {
            table: Tensor::new(vec![names.len(), dim], data)?,
            names,
            no_object: None,
        })
    }

    /// Embeds each class name with the toy text embedder.
    pub fn build(names: &[String], templates: &[String], dim: usize) -> Result<Self> {
        let vectors = names
            .iter()
            .map(|n| {
                embed_text(n, templates, dim)
                    .map(|v| v.into_iter().map(F::lit).collect::<Vec<F>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vectors(names.to_vec(), &vectors)
    }

    /// Attaches a no-object embedding (stored unit-normalized).
    pub fn with_no_object(mut self, v: Vec<F>) -> Result<Self> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "no-object vector length {}, expected {}",
                v.len(),
                self.dim()
            )));
        }
        self.no_object = Some(l2_normalize_slice(&v)?);
        Ok(self)
    }

    /// The default no-object slot: the toy embedding of "no object".
    pub fn with_default_no_object(self) -> Result<Self> {
        let v = embed_sentence("no object", self.dim())?
            .into_iter()
            .map(F::lit)
            .collect();
        self.with_no_object(v)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor<F> {
        &self.table
    }

    pub fn vector(&self, k: usize) -> &[F] {
        self.table.row(k)
    }

    pub fn no_object(&self) -> Option<&[F]> {
        self.no_object.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Subset of classes, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let vectors: Vec<Vec<F>> = indices.iter().map(|&i| self.vector(i).to_vec()).collect();
        let names = indices.iter().map(|&i| self.names[i].clone()).collect();
        let mut out = Self::from_vectors(names, &vectors)?;
        out.no_object = self.no_object.clone();
        Ok(out)
    }

    /// Writes `text.<name>` per class and `no_object` when present.
    pub fn save(&self, dir: &Path) -> Result<()>
    where
        Tensor<F>: Into<crate::numerics::AnyTensor>,
    {
        let mut bundle = Bundle::new();
        for (k, name) in self.names.iter().enumerate() {
            bundle.insert(
                format!("text.{name}"),
                Tensor::new(vec![self.dim()], self.vector(k).to_vec())?,
            );
        }
        if let Some(v) = &self.no_object {
            bundle.insert("no_object", Tensor::new(vec![v.len()], v.clone())?);
        }
        bundle.save(dir)
    }
}

/// Loads a text table bundle, normalizing every vector and checking that all
/// have length `dim`.
pub fn load_text_table<F: Scalar>(dir: &Path, dim: usize) -> Result<VocabularyEmbeddings<F>> {
    let bundle = Bundle::load(dir)?;
    let malformed = |reason: String| Error::Bundle {
        path: dir.to_path_buf(),
        reason,
    };
    let mut names = Vec::new();
    let mut vectors = Vec::new();
    let mut no_object = None;
    for (name, t) in bundle.iter() {
        let v: Vec<F> = t.cast::<F>().into_data();
        if v.len() != dim || t.shape().len() != 1 {
            return Err(malformed(format!(
                "{name}: shape {:?}, expected [{dim}]",
                t.shape()
            )));
        }
        if let Some(class) = name.strip_prefix("text.") {
            names.push(class.to_string());
            vectors.push(v);
        } else if name == "no_object" {
            no_object = Some(v);
        } else {
            return Err(malformed(format!("unexpected tensor {name}")));
        }
    }
    let vocab = VocabularyEmbeddings::from_vectors(names, &vectors)?;
    match no_object {
        Some(v) => vocab.with_no_object(v),
        None => Ok(vocab),
    }
}
