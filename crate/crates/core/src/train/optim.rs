use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Every gradient is checked before any parameter moves,
    /// so a non-finite gradient leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let correct1 = T::of(1.0 - beta1.powi(t));
        let correct2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one, lr, eps) = (T::one(), T::of(lr), T::of(eps));
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `rates[k]` applies to epochs after the
/// `k`-th milestone (and `rates[0]` up to and including the first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub rates: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            milestones: vec![50, 90],
            rates: vec![1e-4, 1e-5, 1e-6],
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            milestones: Vec::new(),
            rates: vec![lr],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = self.milestones.windows(2).all(|w| w[0] < w[1]);
        if self.rates.len() != self.milestones.len() + 1 || !sorted {
            return Err(Error::Config(
                "learning-rate schedule needs increasing milestones and one more rate than milestones".into(),
            ));
        }
        if self.rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.rates[passed.min(self.rates.len() - 1)]
    }
}
