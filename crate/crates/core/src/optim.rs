//! Adam optimizer with per-parameter moment state.

use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: T) -> Self {
        Adam::new(lr, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    /// One in-place update. Parameters must arrive in the same order on every
    /// call; moment state is kept per position. Every parameter must carry a
    /// populated gradient.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>)]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.numel()])
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(CoreError::Precondition(format!(
                "optimizer state holds {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            if p.grad.is_none() {
                return Err(CoreError::UnreadyParameter((*name).to_string()));
            }
        }
        self.t += 1;
        let t = T::of(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for (idx, (_, p)) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for e in 0..data.len() {
                let g = grad[e];
                m[e] = self.beta1 * m[e] + (T::one() - self.beta1) * g;
                v[e] = self.beta2 * v[e] + (T::one() - self.beta2) * g * g;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                data[e] = data[e] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
