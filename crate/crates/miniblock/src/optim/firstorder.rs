//! SGD with momentum and Adam.

use crate::nn::{NetworkSpec, Params};

use super::OptimizerConfig;

/// Momentum buffer `m ← μ·m + g`.
#[derive(Debug, Clone)]
pub struct SgdmState {
    pub momentum: Params,
}

impl SgdmState {
    pub fn new(spec: &NetworkSpec) -> Self {
        SgdmState {
            momentum: Params::zeros(spec),
        }
    }

    pub fn float_count(&self) -> usize {
        self.momentum.flat().len()
    }
}

/// `m ← μ·m + g; W ← W − η·(m + γ·W)`.
pub fn sgdm_step(
    state: &mut SgdmState,
    params: &mut Params,
    grads: &Params,
    lr: f64,
    config: &OptimizerConfig,
) {
    let mu = config.momentum;
    let gamma = config.weight_decay;
    for ((m, g), w) in state
        .momentum
        .layers
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(params.layers.iter_mut())
    {
        for ((mv, &gv), wv) in m
            .weights
            .iter_mut()
            .zip(g.weights.iter())
            .zip(w.weights.iter_mut())
        {
            *mv = mu * *mv + gv;
            *wv -= lr * (*mv + gamma * *wv);
        }
        for ((mv, &gv), wv) in m.bias.iter_mut().zip(g.bias.iter()).zip(w.bias.iter_mut()) {
            *mv = mu * *mv + gv;
            *wv -= lr * (*mv + gamma * *wv);
        }
    }
}

/// Adam moment buffers and step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Params,
    pub second_moment: Params,
    pub step: usize,
}

impl AdamState {
    pub fn new(spec: &NetworkSpec) -> Self {
        AdamState {
            first_moment: Params::zeros(spec),
            second_moment: Params::zeros(spec),
            step: 0,
        }
    }

    pub fn float_count(&self) -> usize {
        self.first_moment.flat().len() + self.second_moment.flat().len()
    }
}

/// Bias-corrected Adam with decoupled weight decay:
/// `W ← W − η·(m̂/(√v̂ + ε) + γ·W)`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Params,
    grads: &Params,
    lr: f64,
    config: &OptimizerConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let eps = config.damping;
    let gamma = config.weight_decay;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for l in 0..params.layers.len() {
        let m = &mut state.first_moment.layers[l];
        let v = &mut state.second_moment.layers[l];
        let g = &grads.layers[l];
        let w = &mut params.layers[l];
        let update = |mv: &mut f64, vv: &mut f64, gv: f64, wv: &mut f64| {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *wv -= lr * (m_hat / (v_hat.sqrt() + eps) + gamma * *wv);
        };
        for i in 0..w.weights.len() {
            update(
                &mut m.weights[i],
                &mut v.weights[i],
                g.weights[i],
                &mut w.weights[i],
            );
        }
        for i in 0..w.bias.len() {
            update(&mut m.bias[i], &mut v.bias[i], g.bias[i], &mut w.bias[i]);
        }
    }
}
