//! KFAC preconditioning for fully-connected layers.
//!
//! Each dense layer keeps EMA estimates of the input second moment `A`
//! (bias-augmented) and the pre-activation-derivative second moment `Γ`,
//! with cached inverses damped by `√λ` on each factor. The update
//! preconditions the momentum gradient on both sides:
//! `P = H_Ω · 𝒟Ŵ · H_Γ` in this crate's input-major weight layout.

use crate::error::{Error, Result};
use crate::fisher::{augment_ones, kfac_factors};
use crate::linalg::{damped_inverse, Matrix};
use crate::nn::{LayerSpec, NetworkSpec, Params};

use super::OptimizerConfig;

/// Per-batch quantities KFAC consumes for one layer: the inputs the layer
/// saw and the per-sample gradients of the loss w.r.t. its pre-activations.
#[derive(Debug, Clone)]
pub struct KfacObservation {
    pub inputs: Matrix,
    pub preact_derivs: Matrix,
}

#[derive(Debug, Clone)]
pub struct KfacLayerState {
    pub input_moment: Matrix,
    pub deriv_moment: Matrix,
    pub input_inverse: Matrix,
    pub deriv_inverse: Matrix,
    pub stats_iteration: usize,
    pub inverse_iteration: usize,
}

#[derive(Debug, Clone)]
pub struct KfacState {
    pub layers: Vec<KfacLayerState>,
    pub momentum: Params,
    pub iteration: usize,
    spec: NetworkSpec,
    warm_batches: usize,
}

impl KfacState {
    /// Dense layers only; conv layers are out of scope for this method.
    pub fn new(spec: &NetworkSpec, config: &OptimizerConfig) -> Result<Self> {
        let factor_damping = config.damping.sqrt();
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match layer {
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    let a_dim = in_dim + usize::from(layer.has_bias());
                    let mut input_inverse = Matrix::identity(a_dim);
                    input_inverse.scale(1.0 / factor_damping);
                    let mut deriv_inverse = Matrix::identity(*out_dim);
                    deriv_inverse.scale(1.0 / factor_damping);
                    Ok(KfacLayerState {
                        input_moment: Matrix::zeros(a_dim, a_dim),
                        deriv_moment: Matrix::zeros(*out_dim, *out_dim),
                        input_inverse,
                        deriv_inverse,
                        stats_iteration: 0,
                        inverse_iteration: 0,
                    })
                }
                LayerSpec::Conv2d { .. } => Err(Error::UnsupportedLayer {
                    context: format!("kfac does not support conv layers (layer {l})"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KfacState {
            layers,
            momentum: Params::zeros(spec),
            iteration: 0,
            spec: spec.clone(),
            warm_batches: 0,
        })
    }

    pub fn warm_accumulate(&mut self, observations: &[KfacObservation]) -> Result<()> {
        for (l, obs) in observations.iter().enumerate() {
            let fresh = fresh_factors(&self.spec.layers[l], obs)?;
            self.layers[l].input_moment.add_scaled(1.0, &fresh.input_moment);
            self.layers[l].deriv_moment.add_scaled(1.0, &fresh.deriv_moment);
        }
        self.warm_batches += 1;
        Ok(())
    }

    pub fn warm_finalize(&mut self, batches: usize, config: &OptimizerConfig) -> Result<()> {
        let scale = 1.0 / batches.max(1) as f64;
        let factor_damping = config.damping.sqrt();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.input_moment.scale(scale);
            layer.deriv_moment.scale(scale);
            layer.input_inverse = damped_inverse(&layer.input_moment, factor_damping)
                .map_err(|_| Error::InversionFailed {
                    block: format!("layer {l} input factor"),
                })?;
            layer.deriv_inverse = damped_inverse(&layer.deriv_moment, factor_damping)
                .map_err(|_| Error::InversionFailed {
                    block: format!("layer {l} derivative factor"),
                })?;
        }
        self.warm_batches = 0;
        Ok(())
    }

    pub fn float_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input_moment.data().len() + l.deriv_moment.data().len())
            .sum()
    }
}

fn fresh_factors(layer: &LayerSpec, obs: &KfacObservation) -> Result<crate::fisher::KfacFactors> {
    let inputs = if layer.has_bias() {
        augment_ones(&obs.inputs)
    } else {
        obs.inputs.clone()
    };
    kfac_factors(&inputs, &obs.preact_derivs)
}

/// Momentum gradient of a dense layer stacked as an `(I+1) × O` matrix
/// (weights rows first, bias row last).
fn stacked(layer: &LayerSpec, values: &crate::nn::LayerParams) -> Matrix {
    let (i_dim, o_dim) = match layer {
        LayerSpec::Dense { in_dim, out_dim, .. } => (*in_dim, *out_dim),
        _ => unreachable!(),
    };
    let rows = i_dim + usize::from(layer.has_bias());
    let mut m = Matrix::zeros(rows, o_dim);
    for i in 0..i_dim {
        m.row_mut(i)
            .copy_from_slice(&values.weights[i * o_dim..(i + 1) * o_dim]);
    }
    if layer.has_bias() {
        m.row_mut(i_dim).copy_from_slice(&values.bias);
    }
    m
}

/// One KFAC iteration: momentum, factor EMAs at `T₁`, damped factor
/// inversions at `T₂`, then `W ← W − η·(H_Ω·𝒟Ŵ·H_Γ + γ·W)`.
pub fn kfac_step(
    state: &mut KfacState,
    params: &mut Params,
    grads: &Params,
    observations: &[KfacObservation],
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    if observations.len() != state.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "kfac observations".into(),
            expected: (state.layers.len(), 0),
            got: (observations.len(), 0),
        });
    }
    let k = state.iteration + 1;
    let factor_damping = config.damping.sqrt();
    let gamma = config.weight_decay;
    for l in 0..state.layers.len() {
        let layer = state.spec.layers[l].clone();
        {
            let mom = &mut state.momentum.layers[l];
            mom.scale(config.momentum);
            mom.axpy(1.0, &grads.layers[l]);
        }
        let ls = &mut state.layers[l];
        if k % config.stats_period == 0 {
            let fresh = fresh_factors(&layer, &observations[l])?;
            ls.input_moment.scale(config.ema);
            ls.input_moment.add_scaled(1.0 - config.ema, &fresh.input_moment);
            ls.deriv_moment.scale(config.ema);
            ls.deriv_moment.add_scaled(1.0 - config.ema, &fresh.deriv_moment);
            ls.stats_iteration = k;
        }
        if k % config.inverse_period == 0 {
            ls.input_inverse = damped_inverse(&ls.input_moment, factor_damping).map_err(|_| {
                Error::InversionFailed {
                    block: format!("layer {l} input factor"),
                }
            })?;
            ls.deriv_inverse = damped_inverse(&ls.deriv_moment, factor_damping).map_err(|_| {
                Error::InversionFailed {
                    block: format!("layer {l} derivative factor"),
                }
            })?;
            ls.inverse_iteration = k;
        }
        let mom_stacked = stacked(&layer, &state.momentum.layers[l]);
        let preconditioned = ls.input_inverse.mul(&mom_stacked).mul(&ls.deriv_inverse);
        let (i_dim, o_dim) = match layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => (in_dim, out_dim),
            _ => unreachable!(),
        };
        let w = &mut params.layers[l];
        for i in 0..i_dim {
            let src = preconditioned.row(i);
            let dst = &mut w.weights[i * o_dim..(i + 1) * o_dim];
            for (wv, &pv) in dst.iter_mut().zip(src.iter()) {
                *wv -= lr * (pv + gamma * *wv);
            }
        }
        if layer.has_bias() {
            let src = preconditioned.row(i_dim);
            for (wv, &pv) in w.bias.iter_mut().zip(src.iter()) {
                *wv -= lr * (pv + gamma * *wv);
            }
        }
    }
    state.iteration = k;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::kronecker;
    use crate::linalg::sym_eig;
    use crate::nn::{Activation, LossKind};
    use crate::optim::Method;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_spec(i: usize, o: usize) -> NetworkSpec {
        NetworkSpec::new(
            vec![LayerSpec::Dense {
                in_dim: i,
                out_dim: o,
                has_bias: true,
                activation: Activation::Identity,
            }],
            LossKind::SquaredError,
        )
        .unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn conv_layers_are_rejected() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                radius: 1,
                height: 3,
                width: 3,
                has_bias: true,
                activation: Activation::Relu,
            }],
            LossKind::SquaredError,
        )
        .unwrap();
        let cfg = OptimizerConfig::defaults_for(Method::Kfac);
        assert!(matches!(
            KfacState::new(&spec, &cfg),
            Err(Error::UnsupportedLayer { .. })
        ));
    }

    #[test]
    fn identity_factors_scale_momentum() {
        // A = Γ = I: step is −η·𝒟Ŵ/(1+√λ)²
        let spec = dense_spec(3, 2);
        let mut cfg = OptimizerConfig::defaults_for(Method::Kfac);
        cfg.weight_decay = 0.0;
        cfg.stats_period = 10_000;
        cfg.inverse_period = 10_000;
        let mut state = KfacState::new(&spec, &cfg).unwrap();
        state.layers[0].input_moment = Matrix::identity(4);
        state.layers[0].deriv_moment = Matrix::identity(2);
        let sqrt_l = cfg.damping.sqrt();
        state.layers[0].input_inverse =
            damped_inverse(&state.layers[0].input_moment, sqrt_l).unwrap();
        state.layers[0].deriv_inverse =
            damped_inverse(&state.layers[0].deriv_moment, sqrt_l).unwrap();
        let mut params = Params::zeros(&spec);
        let mut grads = Params::zeros(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        grads.layers[0]
            .weights
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        grads.layers[0]
            .bias
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let obs = vec![KfacObservation {
            inputs: Matrix::zeros(1, 3),
            preact_derivs: Matrix::zeros(1, 2),
        }];
        let lr = 0.1;
        kfac_step(&mut state, &mut params, &grads, &obs, lr, &cfg).unwrap();
        let scale = lr / ((1.0 + sqrt_l) * (1.0 + sqrt_l));
        for (&w, &g) in params.layers[0]
            .weights
            .iter()
            .chain(params.layers[0].bias.iter())
            .zip(grads.layers[0].weights.iter().chain(grads.layers[0].bias.iter()))
        {
            assert!((w + scale * g).abs() < 1e-12, "{w} vs {g}");
        }
    }

    #[test]
    fn output_shape_matches_gradients() {
        let spec = dense_spec(5, 7);
        let cfg = OptimizerConfig::defaults_for(Method::Kfac);
        let mut state = KfacState::new(&spec, &cfg).unwrap();
        let mut params = crate::nn::init_params(&spec, 1);
        let before = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut grads = Params::zeros(&spec);
        let gl = &mut grads.layers[0];
        gl.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        gl.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let obs = vec![KfacObservation {
            inputs: random_matrix(6, 5, &mut rng),
            preact_derivs: random_matrix(6, 7, &mut rng),
        }];
        kfac_step(&mut state, &mut params, &grads, &obs, 0.01, &cfg).unwrap();
        assert_eq!(params.layers[0].weights.len(), before.layers[0].weights.len());
        assert_eq!(params.layers[0].bias.len(), before.layers[0].bias.len());
        assert!(params.is_finite());
        assert_ne!(params, before);
    }

    #[test]
    fn kronecker_solve_identity() {
        // (A ⊗ Γ)·vec(Γ⁻¹·V·A⁻¹) = vec(V) with vec indexed as i·O + o
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw_a = random_matrix(4, 4, &mut rng);
        let mut a = raw_a.tmul(&raw_a);
        for i in 0..4 {
            let v = a.get(i, i) + 0.5;
            a.set(i, i, v);
        }
        a.symmetrize();
        let raw_g = random_matrix(3, 3, &mut rng);
        let mut g = raw_g.tmul(&raw_g);
        for i in 0..3 {
            let v = g.get(i, i) + 0.5;
            g.set(i, i, v);
        }
        g.symmetrize();
        let a_inv = sym_eig(&a).unwrap().map(|w| 1.0 / w);
        let g_inv = sym_eig(&g).unwrap().map(|w| 1.0 / w);
        let v_mat = random_matrix(3, 4, &mut rng); // O × (I+1)
        let solved = g_inv.mul(&v_mat).mul(&a_inv);
        let mut solved_vec = vec![0.0; 12];
        let mut v_vec = vec![0.0; 12];
        for i in 0..4 {
            for o in 0..3 {
                solved_vec[i * 3 + o] = solved.get(o, i);
                v_vec[i * 3 + o] = v_mat.get(o, i);
            }
        }
        let back = kronecker(&a, &g).mul_vec(&solved_vec);
        for (x, y) in back.iter().zip(v_vec.iter()) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}
