use crate::error::{Error, Result};
use crate::math::Real;

use super::GradientBuffer;

/// Bias-corrected Adam with moment buffers shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &GradientBuffer<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.data.len() != self.m.len() {
            return Err(Error::mismatch("optimizer state size", self.m.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            if g == T::zero() && *m == T::zero() && *v == T::zero() {
                continue;
            }
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
        Ok(())
    }
}
