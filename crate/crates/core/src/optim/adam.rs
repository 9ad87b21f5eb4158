//! Adam with L2 decay folded into the gradient.

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, l2: 2e-4 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.l2 >= 0.0
            && [self.lr, self.epsilon, self.l2].iter().all(|v| v.is_finite());
        if !ok {
            bail!(Config, "invalid Adam hyperparameters {self:?}");
        }
        Ok(())
    }
}

/// Moment accumulators for an ordered list of parameter tensors. The order
/// must stay the same from step to step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { hyper, t: 0, m: Vec::new(), v: Vec::new() })
    }

    /// One update of every tensor from its gradient buffer (absent buffer
    /// means zero gradient). Nothing is modified if any gradient is
    /// non-finite.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(k) = g.iter().position(|v| !v.as_f64().is_finite()) {
                    bail!(Numeric, "non-finite gradient in parameter {i} at element {k} (step {})", self.t + 1);
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            bail!(State, "parameter layout changed between Adam steps");
        }
        self.t += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powf(self.t as f64);
        let c2 = 1.0 - h.beta2.powf(self.t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let has_grad = p.has_grad();
            let (theta, grad) = if has_grad { p.data_and_grad_mut() } else { (p.data_mut(), &mut [][..]) };
            for k in 0..theta.len() {
                let th = theta[k].as_f64();
                let g = grad.get(k).map_or(0.0, |g| g.as_f64()) + h.l2 * th;
                m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
                v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
                let step = h.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + h.epsilon);
                theta[k] = S::from_f64(th - step);
            }
        }
        Ok(())
    }
}
