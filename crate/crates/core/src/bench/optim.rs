use crate::autodiff::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        AdamWState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Returns false (and leaves
/// everything untouched) when a gradient is not finite.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamWState, cfg: &AdamWConfig) -> bool {
    if !grads.is_finite() {
        log::warn!("non-finite gradient, skipping optimizer step {}", state.step + 1);
        return false;
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in store.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((theta, &g), m), v) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *theta -= cfg.lr * (update + cfg.weight_decay * *theta);
        }
    }
    true
}
