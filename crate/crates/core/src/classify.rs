//! Similarity-based class probabilities and the two-branch ensemble.

use serde::{Deserialize, Serialize};

use crate::encoder::VocabularyEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::kernels::{cosine, softmax_in_place};
use crate::numerics::Scalar;

/// Nonnegative per-class scores for one proposal. When `has_no_object` is
/// set, the last entry is the no-object slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
    pub has_no_object: bool,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self {
            probs,
            has_no_object: false,
        }
    }

    /// Number of real classes (excludes the no-object slot).
    pub fn num_classes(&self) -> usize {
        self.probs.len() - usize::from(self.has_no_object)
    }

    /// Scores of the real classes only.
    pub fn class_scores(&self) -> &[f64] {
        &self.probs[..self.num_classes()]
    }

    pub fn no_object(&self) -> Option<f64> {
        self.has_no_object.then(|| *self.probs.last().expect("nonempty"))
    }

    /// Index of the largest score, lowest index on ties. May point at the
    /// no-object slot.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn is_no_object_argmax(&self) -> bool {
        self.has_no_object && self.argmax() == self.probs.len() - 1
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn renormalized(&self) -> Self {
        let s = self.sum();
        Self {
            probs: self.probs.iter().map(|p| if s > 0.0 { p / s } else { 0.0 }).collect(),
            has_no_object: self.has_no_object,
        }
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Softmax over temperature-scaled cosine similarities.
pub fn probs_from_similarities(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mut logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// `p_k = exp(cos(v, t_k)/τ) / Σ_j exp(cos(v, t_j)/τ)` over the real classes.
pub fn class_probs<F: Scalar>(
    v: &[F],
    vocab: &VocabularyEmbeddings<F>,
    tau: f64,
) -> Result<ClassDistribution> {
    let sims = similarities(v, vocab)?;
    Ok(ClassDistribution::new(probs_from_similarities(&sims, tau)?))
}

/// Like [`class_probs`] but also scores the no-object embedding, which is
/// appended as the last slot.
pub fn class_probs_with_no_object<F: Scalar>(
    v: &[F],
    vocab: &VocabularyEmbeddings<F>,
    tau: f64,
) -> Result<ClassDistribution> {
    let empty = vocab
        .no_object()
        .ok_or_else(|| Error::InvalidArgument("vocabulary has no no-object embedding".into()))?;
    let mut sims = similarities(v, vocab)?;
    sims.push(cosine(v, empty).as_f64());
    Ok(ClassDistribution {
        probs: probs_from_similarities(&sims, tau)?,
        has_no_object: true,
    })
}

/// Cosine similarity of `v` with every class embedding.
pub fn similarities<F: Scalar>(v: &[F], vocab: &VocabularyEmbeddings<F>) -> Result<Vec<f64>> {
    if v.len() != vocab.dim() {
        return Err(Error::Shape(format!(
            "embedding length {}, vocabulary dim {}",
            v.len(),
            vocab.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("embedding is not finite".into()));
    }
    Ok((0..vocab.len())
        .map(|k| cosine(v, vocab.vector(k)).as_f64())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub lambda: f64,
    /// Divide the blend by its sum. For inspection only; fusion and argmax
    /// do not need it.
    pub renormalize: bool,
}

impl EnsembleConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self {
            lambda,
            renormalize: false,
        })
    }
}

/// `x^e` with `0^0 = 1`.
fn pow0(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Elementwise geometric blend `p^(1−λ) · p̂^λ`, not renormalized.
pub fn ensemble(
    p: &ClassDistribution,
    p_hat: &ClassDistribution,
    lambda: f64,
) -> Result<ClassDistribution> {
    EnsembleConfig::new(lambda)?;
    if p.probs.len() != p_hat.probs.len() {
        return Err(Error::Shape(format!(
            "ensemble of {} and {} entries",
            p.probs.len(),
            p_hat.probs.len()
        )));
    }
    if p.probs.iter().chain(&p_hat.probs).any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument("distributions must be nonnegative".into()));
    }
    let has_no_object = p.has_no_object || p_hat.has_no_object;
    if lambda == 0.0 {
        return Ok(ClassDistribution {
            probs: p.probs.clone(),
            has_no_object,
        });
    }
    if lambda == 1.0 {
        return Ok(ClassDistribution {
            probs: p_hat.probs.clone(),
            has_no_object,
        });
    }
    let probs = p
        .probs
        .iter()
        .zip(&p_hat.probs)
        .map(|(&a, &b)| pow0(a, 1.0 - lambda) * pow0(b, lambda))
        .collect();
    Ok(ClassDistribution {
        probs,
        has_no_object,
    })
}

/// Applies [`ensemble`] and optionally renormalizes.
pub fn ensemble_with(
    p: &ClassDistribution,
    p_hat: &ClassDistribution,
    config: EnsembleConfig,
) -> Result<ClassDistribution> {
    let out = ensemble(p, p_hat, config.lambda)?;
    Ok(if config.renormalize { out.renormalized() } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab(vectors: Vec<Vec<f64>>) -> VocabularyEmbeddings<f64> {
        let names = (0..vectors.len()).map(|i| format!("c{i}")).collect();
        VocabularyEmbeddings::from_vectors(names, &vectors).unwrap()
    }

    #[test]
    fn orthogonal_query_gives_uniform() {
        let v = vocab(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let p = class_probs(&[0.0, 0.0, 2.0], &v, 0.01).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn aligned_query_at_unit_temperature() {
        let v = vocab(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = class_probs(&[1.0, 0.0], &v, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn small_temperature_is_one_hot() {
        let v = vocab(vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]);
        let p = class_probs(&[0.9, 0.1], &v, 1e-3).unwrap();
        assert!((p.probs[0] - 1.0).abs() < 1e-6);
        assert!(p.probs[1] < 1e-6 && p.probs[2] < 1e-6);
    }

    #[test]
    fn bad_temperature_and_dims() {
        let v = vocab(vec![vec![1.0, 0.0]]);
        assert!(class_probs(&[1.0, 0.0], &v, 0.0).is_err());
        assert!(class_probs(&[1.0, 0.0], &v, -1.0).is_err());
        assert!(class_probs(&[1.0], &v, 1.0).is_err());
        assert!(class_probs_with_no_object(&[1.0, 0.0], &v, 1.0).is_err());
    }

    #[test]
    fn no_object_slot_is_last() {
        let v = vocab(vec![vec![1.0, 0.0]]).with_no_object(vec![0.0, 1.0]).unwrap();
        let p = class_probs_with_no_object(&[0.0, 1.0], &v, 0.1).unwrap();
        assert_eq!(p.probs.len(), 2);
        assert!(p.is_no_object_argmax());
        assert_eq!(p.class_scores().len(), 1);
    }

    #[test]
    fn ensemble_endpoints_are_exact() {
        let p = ClassDistribution::new(vec![0.3, 0.0, 0.7]);
        let q = ClassDistribution::new(vec![0.0, 0.9, 0.1]);
        assert_eq!(ensemble(&p, &q, 0.0).unwrap().probs, p.probs);
        assert_eq!(ensemble(&p, &q, 1.0).unwrap().probs, q.probs);
    }

    #[test]
    fn ensemble_worked_example() {
        let p = ClassDistribution::new(vec![0.8, 0.2]);
        let q = ClassDistribution::new(vec![0.5, 0.5]);
        let out = ensemble(&p, &q, 0.7).unwrap();
        // exp/ln evaluation as an independent route
        let expect0 = (0.3 * 0.8f64.ln() + 0.7 * 0.5f64.ln()).exp();
        let expect1 = (0.3 * 0.2f64.ln() + 0.7 * 0.5f64.ln()).exp();
        assert!((out.probs[0] - expect0).abs() < 1e-9);
        assert!((out.probs[1] - expect1).abs() < 1e-9);
        assert_eq!(out.argmax(), 0);
        assert!((out.sum() - 1.0).abs() > 1e-3, "blend is not renormalized");
        let cfg = EnsembleConfig { lambda: 0.7, renormalize: true };
        assert!((ensemble_with(&p, &q, cfg).unwrap().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_zero_to_the_zero_is_one() {
        let p = ClassDistribution::new(vec![0.0, 1.0]);
        let q = ClassDistribution::new(vec![0.0, 1.0]);
        let out = ensemble(&p, &q, 0.5).unwrap();
        assert_eq!(out.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn ensemble_errors() {
        let p = ClassDistribution::new(vec![0.5, 0.5]);
        let q = ClassDistribution::new(vec![1.0]);
        assert!(ensemble(&p, &q, 0.5).is_err());
        let neg = ClassDistribution::new(vec![-0.1, 1.1]);
        assert!(ensemble(&p, &neg, 0.5).is_err());
        assert!(ensemble(&p, &p, 1.5).is_err());
    }

    #[test]
    fn class_probs_shift_invariant() {
        let mut rng = seeded(11);
        for _ in 0..100 {
            let sims: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shift: f64 = rng.random_range(-0.5..0.5);
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let a = probs_from_similarities(&sims, 0.1).unwrap();
            let b = probs_from_similarities(&shifted, 0.1).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn ensemble_is_monotone(
            p in proptest::collection::vec(0.0f64..1.0, 2..6),
            q_seed in 0u64..1000,
            lambda in 0.0f64..=1.0,
            bump in 0.0f64..1.0,
        ) {
            let mut rng = seeded(q_seed);
            let q: Vec<f64> = (0..p.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let pd = ClassDistribution::new(p.clone());
            let qd = ClassDistribution::new(q);
            let base = ensemble(&pd, &qd, lambda).unwrap();
            let mut p2 = p.clone();
            p2[0] += bump;
            let up = ensemble(&ClassDistribution::new(p2), &qd, lambda).unwrap();
            prop_assert!(up.probs[0] >= base.probs[0]);
        }
    }
}
