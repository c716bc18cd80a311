use crate::numerics::{Scalar, Tensor};

/// Cosine-annealed learning rate for step `t` of `total`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Adam with decoupled weight decay over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &[&Tensor<F>], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|t| vec![F::zero(); t.len()]).collect(),
            v: params.iter().map(|t| vec![F::zero(); t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One update with learning rate `lr`. `params` and `grads` must be in
    /// the order used at construction.
    pub fn step(&mut self, params: Vec<&mut Tensor<F>>, grads: &[&Tensor<F>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = F::lit(1.0 - lr * self.weight_decay);
        let lr_t = lr / c1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv64 = gv.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gv64;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gv64 * gv64;
                m[j] = F::lit(mj);
                v[j] = F::lit(vj);
                let update = lr_t * mj / ((vj / c2).sqrt() + self.eps);
                *w = *w * decay - F::lit(update);
            }
        }
    }
}
