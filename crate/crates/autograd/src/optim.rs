//! Adaptive-moment (Adam) optimizer over a flat list of parameter tensors.

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2.5e-4, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<E: Element> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: Vec<Tensor<E>>,
    pub second: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Adam {
            config,
            steps: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<E>], grads: &[Option<Tensor<E>>]) {
        assert_eq!(params.len(), self.first.len(), "optimizer built for a different parameter list");
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let b1 = E::of(c.beta1);
        let b2 = E::of(c.beta2);
        let one = E::one();
        let bc1 = E::of(1.0 - c.beta1.powi(t));
        let bc2 = E::of(1.0 - c.beta2.powi(t));
        let lr = E::of(c.lr);
        let eps = E::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let pd = p.data_mut();
            for (((pj, mj), vj), &gj) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj = *pj - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
