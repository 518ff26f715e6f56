use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Plain SGD with a step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    /// Multiplied into the rate once every `decay_period` epochs.
    pub decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.05,
            decay: 0.1,
            decay_period: 33,
            batch_size: 120,
            max_epochs: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0) {
            return Err(format!("learning rate must be > 0, got {}", self.base_lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.decay_period == 0 || self.batch_size == 0 {
            return Err("decay period and batch size must be >= 1".into());
        }
        Ok(())
    }

    /// `base_lr * decay^floor(epoch / decay_period)`.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi((epoch / self.decay_period) as i32)
    }
}

/// Applies `p -= rate(epoch) * lr_mult(p) * grad(p)` to every parameter, then
/// clears the gradients.
pub fn sgd_step<F: Scalar>(params: &mut ParamStore<F>, epoch: usize, config: &SgdConfig) {
    let rate = config.rate(epoch);
    for p in params.iter_mut() {
        let step = F::of(rate * p.lr_mult);
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()) {
            *v = *v - step * *g;
            *g = F::zero();
        }
    }
}
