use crate::error::{Error, Result};
use crate::numerics::tape::ParamStore;
use crate::numerics::Tensor;

/// Adam optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps, step: 0, first: zeros(), second: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update from the gradients held in
    /// `store`. A non-finite gradient rejects the whole step.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for p in store.iter() {
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`; step rejected", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            m.expect_same_shape(&p.value)?;
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = m.data()[i] as f64 / bc1;
                let v_hat = v.data()[i] as f64 / bc2;
                values[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
