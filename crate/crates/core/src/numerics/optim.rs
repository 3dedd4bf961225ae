use serde::{Deserialize, Serialize};

use super::ParameterStore;

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One optimizer step over every parameter using the accumulated gradients.
/// Increments the store's step counter.
pub fn adamw_step(store: &mut ParameterStore, opt: &AdamW) {
    let t = store.step() + 1;
    store.set_step(t);
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    for p in store.params_mut() {
        let g = p.grad.data().to_vec();
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..g.len() {
            value[i] *= decay;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
}
