//! Mini-block Fisher preconditioning.
//!
//! [`mbf_step`] is the practical method: gradient momentum, outer-product
//! curvature estimates held as EMAs per mini-block (spatially averaged for
//! large dense layers), amortized inverse refreshes, and per-block
//! preconditioned updates. [`generic_mbf_step`] is the exact variant used by
//! the convergence harness: it rebuilds every block's Fisher from per-sample
//! Jacobian rows each call, with no momentum, EMA or weight decay.

use crate::error::{Error, Result};
use crate::fisher::{
    approx_miniblock_fisher, exact_miniblock_fisher, partition_network, spatial_average_fc,
    EmaBlock, EmaDiagBlock, LayerPartition, MiniBlockPartition,
};
use crate::linalg::{damped_inverse_nonneg, Matrix};
use crate::nn::{LayerSpec, NetworkSpec, Params};
use crate::parallel::{for_each_mut, ordered_map, ordered_map_range};

use super::OptimizerConfig;

/// Per-layer curvature state.
#[derive(Debug, Clone)]
pub enum MbfLayerState {
    Conv {
        kernels: Vec<EmaBlock>,
        bias: Option<EmaDiagBlock>,
    },
    DensePerNeuron {
        neurons: Vec<EmaBlock>,
    },
    DenseShared {
        shared: EmaBlock,
    },
}

#[derive(Debug, Clone)]
pub struct MbfState {
    pub layers: Vec<MbfLayerState>,
    pub momentum: Params,
    pub partition: MiniBlockPartition,
    pub iteration: usize,
    spec: NetworkSpec,
}

impl MbfState {
    /// Zero-initialized statistics; cached inverses start at `I/λ`.
    pub fn new(spec: &NetworkSpec, config: &OptimizerConfig) -> Result<Self> {
        let partition = partition_network(spec, config.spatial_avg_threshold);
        let damping = config.damping;
        let layers = spec
            .layers
            .iter()
            .zip(partition.layers.iter())
            .map(|(layer, part)| match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let area = layer.kernel_area();
                    let kernels = (0..in_channels * out_channels)
                        .map(|_| EmaBlock::zeros(area, damping))
                        .collect::<Result<Vec<_>>>()?;
                    let bias = layer
                        .has_bias()
                        .then(|| EmaDiagBlock::zeros(*out_channels, damping));
                    Ok(MbfLayerState::Conv { kernels, bias })
                }
                LayerSpec::Dense { out_dim, .. } => {
                    let dim = block_dim(layer);
                    if part.shared {
                        Ok(MbfLayerState::DenseShared {
                            shared: EmaBlock::zeros(dim, damping)?,
                        })
                    } else {
                        let neurons = (0..*out_dim)
                            .map(|_| EmaBlock::zeros(dim, damping))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(MbfLayerState::DensePerNeuron { neurons })
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MbfState {
            layers,
            momentum: Params::zeros(spec),
            partition,
            iteration: 0,
            spec: spec.clone(),
        })
    }

    /// Sum one warm-start batch's instantaneous statistics into `ghat`.
    pub fn warm_accumulate(&mut self, grads: &Params) {
        for (l, layer_state) in self.layers.iter_mut().enumerate() {
            let layer = &self.spec.layers[l];
            let g = &grads.layers[l];
            match layer_state {
                MbfLayerState::Conv { kernels, bias } => {
                    let area = layer.kernel_area();
                    for_each_mut(kernels, |b, blk| {
                        let slice = &g.weights[b * area..(b + 1) * area];
                        blk.ghat.add_scaled_outer(1.0, slice);
                    });
                    if let Some(diag) = bias {
                        for (v, &gb) in diag.second_moments.iter_mut().zip(g.bias.iter()) {
                            *v += gb * gb;
                        }
                    }
                }
                MbfLayerState::DensePerNeuron { neurons } => {
                    let rows = per_neuron_rows(layer, g);
                    for_each_mut(neurons, |j, blk| {
                        blk.ghat.add_scaled_outer(1.0, rows.row(j));
                    });
                }
                MbfLayerState::DenseShared { shared } => {
                    let rows = per_neuron_rows(layer, g);
                    shared.ghat.add_scaled(1.0, &spatial_average_fc(&rows));
                }
            }
        }
    }

    /// Average the warm sums over `batches` and refresh every cached inverse.
    pub fn warm_finalize(&mut self, batches: usize, config: &OptimizerConfig) -> Result<()> {
        let scale = 1.0 / batches.max(1) as f64;
        for layer_state in self.layers.iter_mut() {
            match layer_state {
                MbfLayerState::Conv { kernels, bias } => {
                    for_each_mut(kernels, |_, blk| blk.ghat.scale(scale));
                    if let Some(diag) = bias {
                        diag.second_moments.iter_mut().for_each(|v| *v *= scale);
                        diag.refresh_inverse(config.damping, 0);
                    }
                }
                MbfLayerState::DensePerNeuron { neurons } => {
                    for_each_mut(neurons, |_, blk| blk.ghat.scale(scale));
                }
                MbfLayerState::DenseShared { shared } => shared.ghat.scale(scale),
            }
        }
        self.refresh_all_inverses(config.damping, 0)
    }

    fn refresh_all_inverses(&mut self, damping: f64, iteration: usize) -> Result<()> {
        for (l, layer_state) in self.layers.iter_mut().enumerate() {
            match layer_state {
                MbfLayerState::Conv { kernels, bias } => {
                    refresh_blocks(kernels, damping, iteration, || format!("layer {l} kernel"))?;
                    if let Some(diag) = bias {
                        diag.refresh_inverse(damping, iteration);
                    }
                }
                MbfLayerState::DensePerNeuron { neurons } => {
                    refresh_blocks(neurons, damping, iteration, || format!("layer {l} neuron"))?;
                }
                MbfLayerState::DenseShared { shared } => {
                    shared
                        .refresh_inverse(damping, iteration)
                        .map_err(|_| Error::InversionFailed {
                            block: format!("layer {l} shared"),
                        })?;
                }
            }
        }
        Ok(())
    }

    /// Floats held by the curvature statistics (diagonal bias blocks count
    /// their vector length; cached inverses are not counted).
    pub fn float_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                MbfLayerState::Conv { kernels, bias } => {
                    kernels.iter().map(|b| b.ghat.data().len()).sum::<usize>()
                        + bias.as_ref().map_or(0, |d| d.second_moments.len())
                }
                MbfLayerState::DensePerNeuron { neurons } => {
                    neurons.iter().map(|b| b.ghat.data().len()).sum()
                }
                MbfLayerState::DenseShared { shared } => shared.ghat.data().len(),
            })
            .sum()
    }
}

fn block_dim(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Dense { in_dim, .. } => in_dim + usize::from(layer.has_bias()),
        LayerSpec::Conv2d { .. } => layer.kernel_area(),
    }
}

/// Per-neuron gradient rows of a dense layer: row `j` is column `j` of the
/// weight gradient with the bias gradient appended.
fn per_neuron_rows(layer: &LayerSpec, grads: &crate::nn::LayerParams) -> Matrix {
    let (i_dim, o_dim) = match layer {
        LayerSpec::Dense { in_dim, out_dim, .. } => (*in_dim, *out_dim),
        _ => panic!("per_neuron_rows on conv layer"),
    };
    let dim = block_dim(layer);
    let mut rows = Matrix::zeros(o_dim, dim);
    for j in 0..o_dim {
        let row = rows.row_mut(j);
        for i in 0..i_dim {
            row[i] = grads.weights[i * o_dim + j];
        }
        if layer.has_bias() {
            row[i_dim] = grads.bias[j];
        }
    }
    rows
}

/// Parallel inverse refresh with ordered write-back and block-labelled
/// failures.
fn refresh_blocks(
    blocks: &mut [EmaBlock],
    damping: f64,
    iteration: usize,
    label: impl Fn() -> String,
) -> Result<()> {
    let inverses = ordered_map(blocks, |blk| {
        crate::linalg::damped_inverse(&blk.ghat, damping)
    });
    for (b, (blk, inv)) in blocks.iter_mut().zip(inverses).enumerate() {
        blk.inverse = inv.map_err(|_| Error::InversionFailed {
            block: format!("{} {b}", label()),
        })?;
        blk.inverse_iteration = iteration;
    }
    Ok(())
}

/// One practical mini-block Fisher iteration.
///
/// Order per iteration `k`: momentum `𝒟Ŵ ← μ𝒟Ŵ + ḡ`; if `k ≡ 0 (mod T₁)`
/// refresh the EMA statistics from the raw batch gradient (per kernel block
/// for conv layers, spatially averaged or per neuron for dense layers); if
/// `k ≡ 0 (mod T₂)` recompute the cached damped inverses; then
/// `W_b ← W_b − η·((Ĝ_b + λI)^{-1}𝒟Ŵ_b + γW_b)`, with the conv bias block
/// preconditioned by elementwise division.
pub fn mbf_step(
    state: &mut MbfState,
    params: &mut Params,
    grads: &Params,
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    let k = state.iteration + 1;
    let beta = config.ema;
    let damping = config.damping;
    let gamma = config.weight_decay;
    let stats_due = k % config.stats_period == 0;
    let inverse_due = k % config.inverse_period == 0;

    for l in 0..state.spec.layers.len() {
        let layer = state.spec.layers[l].clone();
        // momentum
        {
            let mom = &mut state.momentum.layers[l];
            mom.scale(config.momentum);
            mom.axpy(1.0, &grads.layers[l]);
        }
        let g = &grads.layers[l];
        match &mut state.layers[l] {
            MbfLayerState::Conv { kernels, bias } => {
                let area = layer.kernel_area();
                if stats_due {
                    for_each_mut(kernels, |b, blk| {
                        let fresh =
                            approx_miniblock_fisher(&g.weights[b * area..(b + 1) * area]);
                        blk.update_stats(&fresh, beta, k);
                    });
                    if let Some(diag) = bias {
                        let fresh: Vec<f64> = g.bias.iter().map(|&v| v * v).collect();
                        diag.update_stats(&fresh, beta, k);
                    }
                }
                if inverse_due {
                    refresh_blocks(kernels, damping, k, || format!("layer {l} kernel"))?;
                    if let Some(diag) = bias {
                        diag.refresh_inverse(damping, k);
                    }
                }
                let mom = &state.momentum.layers[l];
                let directions = ordered_map_range(kernels.len(), |b| {
                    kernels[b]
                        .inverse
                        .mul_vec(&mom.weights[b * area..(b + 1) * area])
                });
                let w = &mut params.layers[l];
                for (b, dir) in directions.into_iter().enumerate() {
                    let slice = &mut w.weights[b * area..(b + 1) * area];
                    for (wv, d) in slice.iter_mut().zip(dir.iter()) {
                        *wv -= lr * (d + gamma * *wv);
                    }
                }
                if let Some(diag) = bias {
                    for ((wv, &mv), &inv) in w
                        .bias
                        .iter_mut()
                        .zip(mom.bias.iter())
                        .zip(diag.inverse.iter())
                    {
                        *wv -= lr * (inv * mv + gamma * *wv);
                    }
                }
            }
            MbfLayerState::DensePerNeuron { neurons } => {
                if stats_due {
                    let rows = per_neuron_rows(&layer, g);
                    for_each_mut(neurons, |j, blk| {
                        let fresh = approx_miniblock_fisher(rows.row(j));
                        blk.update_stats(&fresh, beta, k);
                    });
                }
                if inverse_due {
                    refresh_blocks(neurons, damping, k, || format!("layer {l} neuron"))?;
                }
                let mom_rows = per_neuron_rows(&layer, &state.momentum.layers[l]);
                let directions = ordered_map_range(neurons.len(), |j| {
                    neurons[j].inverse.mul_vec(mom_rows.row(j))
                });
                apply_dense_directions(&mut params.layers[l], &layer, &directions, lr, gamma);
            }
            MbfLayerState::DenseShared { shared } => {
                if stats_due {
                    let rows = per_neuron_rows(&layer, g);
                    shared.update_stats(&spatial_average_fc(&rows), beta, k);
                }
                if inverse_due {
                    shared
                        .refresh_inverse(damping, k)
                        .map_err(|_| Error::InversionFailed {
                            block: format!("layer {l} shared"),
                        })?;
                }
                let mom_rows = per_neuron_rows(&layer, &state.momentum.layers[l]);
                // one shared symmetric inverse preconditions all neurons
                let preconditioned = mom_rows.mul(&shared.inverse);
                let directions: Vec<Vec<f64>> = (0..preconditioned.rows())
                    .map(|j| preconditioned.row(j).to_vec())
                    .collect();
                apply_dense_directions(&mut params.layers[l], &layer, &directions, lr, gamma);
            }
        }
    }
    state.iteration = k;
    Ok(())
}

/// Scatter per-neuron update directions back onto the dense layer.
fn apply_dense_directions(
    w: &mut crate::nn::LayerParams,
    layer: &LayerSpec,
    directions: &[Vec<f64>],
    lr: f64,
    gamma: f64,
) {
    let (i_dim, o_dim) = match layer {
        LayerSpec::Dense { in_dim, out_dim, .. } => (*in_dim, *out_dim),
        _ => unreachable!(),
    };
    for (j, dir) in directions.iter().enumerate().take(o_dim) {
        for i in 0..i_dim {
            let wv = &mut w.weights[i * o_dim + j];
            *wv -= lr * (dir[i] + gamma * *wv);
        }
        if layer.has_bias() {
            let bv = &mut w.bias[j];
            *bv -= lr * (dir[i_dim] + gamma * *bv);
        }
    }
}

/// One exact mini-block natural-gradient iteration.
///
/// For every block in parallel, `W_b ← W_b − η·((1/n)J_bᵀJ_b + λI)^{-1}·g_b`
/// with `g_b = (1/n)·J_bᵀ·r`, the mean-loss gradient of the block. No
/// momentum, EMA or weight decay; `λ = 0` is allowed when the block Fishers
/// are positive definite.
pub fn generic_mbf_step(
    params: &mut Params,
    partition: &MiniBlockPartition,
    jacobian_blocks: &[Vec<Matrix>],
    residuals: &[f64],
    lr: f64,
    damping: f64,
) -> Result<()> {
    if damping < 0.0 {
        return Err(Error::InvalidInput {
            context: format!("damping must be nonnegative, got {damping}"),
        });
    }
    if jacobian_blocks.len() != partition.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "generic_mbf_step layer count".into(),
            expected: (partition.layers.len(), 0),
            got: (jacobian_blocks.len(), 0),
        });
    }
    // flatten (layer, block) tasks for one parallel map over all blocks
    let tasks: Vec<(usize, usize)> = partition
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, p)| (0..p.blocks.len()).map(move |b| (l, b)))
        .collect();
    let directions = ordered_map(&tasks, |&(l, b)| -> Result<Vec<f64>> {
        let jac = &jacobian_blocks[l][b];
        let n = jac.rows().max(1) as f64;
        let fisher = exact_miniblock_fisher(jac);
        let mut grad = vec![0.0; jac.cols()];
        for (s, &r) in residuals.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            for (gv, &jv) in grad.iter_mut().zip(jac.row(s).iter()) {
                *gv += jv * r;
            }
        }
        grad.iter_mut().for_each(|v| *v /= n);
        let inverse = damped_inverse_nonneg(&fisher, damping).map_err(|_| {
            Error::InversionFailed {
                block: format!("layer {l} {}", partition.layers[l].blocks[b].kind.label()),
            }
        })?;
        Ok(inverse.mul_vec(&grad))
    });

    for (&(l, b), dir) in tasks.iter().zip(directions) {
        let dir = dir?;
        let layer_part: &LayerPartition = &partition.layers[l];
        let block = &layer_part.blocks[b];
        let wl = params.layers[l].weights.len();
        for (&idx, &d) in block.indices.iter().zip(dir.iter()) {
            if idx < wl {
                params.layers[l].weights[idx] -= lr * d;
            } else {
                params.layers[l].bias[idx - wl] -= lr * d;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::partition_layer;
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

    fn mixed_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    radius: 1,
                    height: 3,
                    width: 3,
                    has_bias: true,
                    activation: Activation::Tanh,
                },
                LayerSpec::Dense {
                    in_dim: 18,
                    out_dim: 3,
                    has_bias: true,
                    activation: Activation::Identity,
                },
            ],
            LossKind::SquaredError,
        )
        .unwrap()
    }

    fn random_grads(spec: &NetworkSpec, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Params::zeros(spec);
        for l in &mut g.layers {
            l.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            l.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        g
    }

    #[test]
    fn zero_stats_step_is_damped_identity() {
        // with Ĝ = 0 and γ = 0 the step is −(η/λ)·𝒟Ŵ
        let spec = mixed_spec();
        let mut cfg = OptimizerConfig::defaults_for(Method::Mbf);
        cfg.weight_decay = 0.0;
        cfg.stats_period = 10_000; // keep Ĝ at zero
        cfg.inverse_period = 10_000;
        let mut state = MbfState::new(&spec, &cfg).unwrap();
        let mut params = Params::zeros(&spec);
        let g = random_grads(&spec, 1);
        let lr = 0.01;
        mbf_step(&mut state, &mut params, &g, lr, &cfg).unwrap();
        let scale = lr / cfg.damping;
        for (w, gl) in params.layers.iter().zip(g.layers.iter()) {
            for (&wv, &gv) in w.weights.iter().zip(gl.weights.iter()) {
                assert!((wv + scale * gv).abs() < 1e-12 * scale.max(1.0));
            }
            for (&wv, &gv) in w.bias.iter().zip(gl.bias.iter()) {
                assert!((wv + scale * gv).abs() < 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn cached_inverse_matches_damped_inverse_at_refresh() {
        let spec = mixed_spec();
        let mut cfg = OptimizerConfig::defaults_for(Method::Mbf);
        cfg.stats_period = 1;
        cfg.inverse_period = 3;
        let mut state = MbfState::new(&spec, &cfg).unwrap();
        let mut params = crate::nn::init_params(&spec, 7);
        for step in 1..=3 {
            let g = random_grads(&spec, 100 + step);
            mbf_step(&mut state, &mut params, &g, 1e-3, &cfg).unwrap();
        }
        // iteration 3 was a refresh iteration
        match &state.layers[0] {
            MbfLayerState::Conv { kernels, .. } => {
                for blk in kernels {
                    assert_eq!(blk.inverse_iteration, 3);
                    let expect = crate::linalg::damped_inverse(&blk.ghat, cfg.damping).unwrap();
                    assert_eq!(blk.inverse, expect);
                }
            }
            _ => panic!("layer 0 should be conv"),
        }
    }

    #[test]
    fn huge_damping_degenerates_to_scaled_momentum() {
        let spec = mixed_spec();
        let mut cfg = OptimizerConfig::defaults_for(Method::Mbf);
        cfg.damping = 1e6;
        cfg.weight_decay = 0.0;
        cfg.stats_period = 1;
        cfg.inverse_period = 1;
        let mut state = MbfState::new(&spec, &cfg).unwrap();
        let mut params = Params::zeros(&spec);
        let g = random_grads(&spec, 3);
        let lr = 10.0;
        mbf_step(&mut state, &mut params, &g, lr, &cfg).unwrap();
        let scale = lr / cfg.damping;
        for (w, gl) in params.layers.iter().zip(g.layers.iter()) {
            for (&wv, &gv) in w.weights.iter().zip(gl.weights.iter()) {
                if gv.abs() > 1e-6 {
                    assert!(
                        ((-wv / scale) - gv).abs() <= 1e-4 * gv.abs(),
                        "{wv} vs {gv}"
                    );
                }
            }
        }
    }

    #[test]
    fn weight_decay_zero_makes_step_independent_of_weights() {
        let spec = mixed_spec();
        let mut cfg = OptimizerConfig::defaults_for(Method::Mbf);
        cfg.weight_decay = 0.0;
        let g = random_grads(&spec, 5);
        let run = |init_seed: u64| {
            let mut state = MbfState::new(&spec, &cfg).unwrap();
            let mut params = crate::nn::init_params(&spec, init_seed);
            let before = params.clone();
            mbf_step(&mut state, &mut params, &g, 0.01, &cfg).unwrap();
            let mut delta = params;
            delta.axpy(-1.0, &before);
            delta
        };
        let d1 = run(1);
        let d2 = run(2);
        for (a, b) in d1.layers.iter().zip(d2.layers.iter()) {
            for (&x, &y) in a.weights.iter().zip(b.weights.iter()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn amortized_inverses_agree_on_refresh_iterations() {
        let spec = dense_spec(4, 3);
        let base = OptimizerConfig::defaults_for(Method::Mbf);
        let mut every = base.clone();
        every.stats_period = 1;
        every.inverse_period = 1;
        let mut amortized = base.clone();
        amortized.stats_period = 1;
        amortized.inverse_period = 5;
        let grads: Vec<Params> = (0..10).map(|i| random_grads(&spec, 40 + i)).collect();
        let mut s1 = MbfState::new(&spec, &every).unwrap();
        let mut s2 = MbfState::new(&spec, &amortized).unwrap();
        let mut p1 = Params::zeros(&spec);
        let mut p2 = Params::zeros(&spec);
        for (k, g) in grads.iter().enumerate() {
            mbf_step(&mut s1, &mut p1, g, 1e-3, &every).unwrap();
            mbf_step(&mut s2, &mut p2, g, 1e-3, &amortized).unwrap();
            if (k + 1) % 5 == 0 {
                match (&s1.layers[0], &s2.layers[0]) {
                    (
                        MbfLayerState::DensePerNeuron { neurons: n1 },
                        MbfLayerState::DensePerNeuron { neurons: n2 },
                    ) => {
                        for (a, b) in n1.iter().zip(n2.iter()) {
                            assert_eq!(a.inverse, b.inverse, "inverse mismatch at k={}", k + 1);
                        }
                    }
                    _ => panic!("unexpected layer state"),
                }
            }
        }
    }

    #[test]
    fn generic_step_scalar_block_is_scalar_ngd() {
        // p_b = 1: update = −η·g/((1/n)·Σ J² + λ)
        let spec = NetworkSpec::new(
            vec![LayerSpec::Dense {
                in_dim: 1,
                out_dim: 1,
                has_bias: false,
                activation: Activation::Identity,
            }],
            LossKind::SquaredError,
        )
        .unwrap();
        let partition = partition_network(&spec, usize::MAX);
        let mut params = Params::zeros(&spec);
        let jac = Matrix::from_rows(&[&[2.0], &[1.0], &[-1.0]]).unwrap();
        let residuals = vec![0.5, -1.0, 2.0];
        let lr = 0.1;
        let lambda = 0.05;
        generic_mbf_step(
            &mut params,
            &partition,
            &[vec![jac.clone()]],
            &residuals,
            lr,
            lambda,
        )
        .unwrap();
        let n = 3.0;
        let fisher = (4.0 + 1.0 + 1.0) / n;
        let grad = (2.0 * 0.5 + 1.0 * -1.0 + -1.0 * 2.0) / n;
        let expect = -lr * grad / (fisher + lambda);
        assert!((params.layers[0].weights[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn generic_step_huge_damping_is_gradient_descent() {
        let spec = dense_spec(3, 2);
        let partition = partition_network(&spec, usize::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 6;
        let blocks: Vec<Matrix> = partition.layers[0]
            .blocks
            .iter()
            .map(|b| {
                let mut j = Matrix::zeros(n, b.indices.len());
                for v in j.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                j
            })
            .collect();
        let residuals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = 1e9;
        let lr = 1.0;
        let mut params = Params::zeros(&spec);
        generic_mbf_step(
            &mut params,
            &partition,
            &[blocks.clone()],
            &residuals,
            lr,
            lambda,
        )
        .unwrap();
        // step → −(η/λ)·g per block
        for (b, block) in partition.layers[0].blocks.iter().enumerate() {
            let jac = &blocks[b];
            for (slot, &idx) in block.indices.iter().enumerate() {
                let mut g = 0.0;
                for s in 0..n {
                    g += jac.get(s, slot) * residuals[s];
                }
                g /= n as f64;
                let expect = -lr * g / lambda;
                let got = if idx < params.layers[0].weights.len() {
                    params.layers[0].weights[idx]
                } else {
                    params.layers[0].bias[idx - params.layers[0].weights.len()]
                };
                assert!(
                    (got - expect).abs() <= 1e-4 * expect.abs().max(1e-12),
                    "block {b} slot {slot}"
                );
            }
        }
    }

    #[test]
    fn generic_step_scale_covariance_at_zero_damping() {
        // scaling the Jacobian by c scales the undamped step by 1/c
        let layer = LayerSpec::Dense {
            in_dim: 2,
            out_dim: 1,
            has_bias: true,
            activation: Activation::Identity,
        };
        let spec = NetworkSpec::new(vec![layer.clone()], LossKind::SquaredError).unwrap();
        let partition = MiniBlockPartition {
            layers: vec![partition_layer(&layer, false)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let mut jac = Matrix::zeros(n, 3);
        for v in jac.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let residuals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let step_for = |c: f64| {
            let mut scaled = jac.clone();
            scaled.scale(c);
            let mut params = Params::zeros(&spec);
            generic_mbf_step(&mut params, &partition, &[vec![scaled]], &residuals, 1.0, 0.0)
                .unwrap();
            params.flat()
        };
        let base = step_for(1.0);
        let c = 3.7;
        let scaled = step_for(c);
        for (&a, &b) in base.iter().zip(scaled.iter()) {
            assert!((a / c - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn steps_stay_finite() {
        let spec = mixed_spec();
        let cfg = OptimizerConfig::defaults_for(Method::Mbf);
        let mut state = MbfState::new(&spec, &cfg).unwrap();
        let mut params = crate::nn::init_params(&spec, 9);
        for i in 0..25 {
            let g = random_grads(&spec, 200 + i);
            mbf_step(&mut state, &mut params, &g, 0.01, &cfg).unwrap();
            assert!(params.is_finite());
        }
    }
}
