//! Curvature statistics: mini-block partitions, exact and approximate
//! mini-block Fisher matrices, the dense empirical Fisher for tiny nets,
//! KFAC factors, and the in/off-block mass measurement.
//!
//! A layer's parameters are split into mini-blocks: one block per kernel
//! (input/output channel pair) plus a diagonal bias block for conv layers,
//! and one block per output neuron (incoming weights plus bias) for dense
//! layers. Large dense layers can instead share a single spatially-averaged
//! preconditioner across all neurons.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{LayerSpec, NetworkSpec};

/// What a mini-block covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// One conv kernel, all `(2R+1)²` taps of input channel `in_ch` feeding
    /// output channel `out_ch`.
    ConvKernel { in_ch: usize, out_ch: usize },
    /// Conv bias vector; its Fisher is kept as a diagonal.
    ConvBias,
    /// One dense output neuron's incoming weights plus its bias.
    FcNeuron { neuron: usize },
    /// Same index set as [`BlockKind::FcNeuron`], but the layer keeps one
    /// shared spatially-averaged statistic for all neurons.
    FcShared { neuron: usize },
}

impl BlockKind {
    pub fn label(&self) -> String {
        match self {
            BlockKind::ConvKernel { in_ch, out_ch } => format!("kernel({in_ch},{out_ch})"),
            BlockKind::ConvBias => "conv_bias".into(),
            BlockKind::FcNeuron { neuron } => format!("neuron({neuron})"),
            BlockKind::FcShared { neuron } => format!("shared_neuron({neuron})"),
        }
    }
}

/// A mini-block: label plus the flat parameter indices it owns within its
/// layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub kind: BlockKind,
    pub indices: Vec<usize>,
}

/// Partition of one layer's parameters into mini-blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    pub blocks: Vec<Block>,
    /// Dense layer sharing one spatially-averaged statistic.
    pub shared: bool,
}

impl LayerPartition {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_len(&self) -> usize {
        self.blocks.iter().map(|b| b.indices.len()).sum()
    }
}

/// Per-layer partition for a whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBlockPartition {
    pub layers: Vec<LayerPartition>,
}

impl MiniBlockPartition {
    pub fn total_blocks(&self) -> usize {
        self.layers.iter().map(|l| l.block_count()).sum()
    }
}

/// Dense layers whose per-neuron statistics would exceed this many floats
/// (`O·(I+1)²`) switch to the shared spatially-averaged preconditioner.
pub const DEFAULT_SPATIAL_AVG_THRESHOLD: usize = 1 << 24;

/// Mini-block partition of one layer.
///
/// Conv layers yield `I·J` kernel blocks plus one diagonal bias block; dense
/// layers yield `O` blocks of size `I+1` (or `I` without bias).
/// `spatial_avg` only affects dense layers, marking all neuron blocks as
/// sharing one statistic.
pub fn partition_layer(layer: &LayerSpec, spatial_avg: bool) -> LayerPartition {
    match layer {
        LayerSpec::Dense { in_dim, out_dim, .. } => {
            let (i_dim, o_dim) = (*in_dim, *out_dim);
            let has_bias = layer.has_bias();
            let blocks = (0..o_dim)
                .map(|j| {
                    let mut indices: Vec<usize> = (0..i_dim).map(|i| i * o_dim + j).collect();
                    if has_bias {
                        indices.push(i_dim * o_dim + j);
                    }
                    Block {
                        kind: if spatial_avg {
                            BlockKind::FcShared { neuron: j }
                        } else {
                            BlockKind::FcNeuron { neuron: j }
                        },
                        indices,
                    }
                })
                .collect();
            LayerPartition {
                blocks,
                shared: spatial_avg,
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            ..
        } => {
            let (j_ch, i_ch) = (*in_channels, *out_channels);
            let area = layer.kernel_area();
            let mut blocks = Vec::with_capacity(j_ch * i_ch + 1);
            for j in 0..j_ch {
                for i in 0..i_ch {
                    let base = (j * i_ch + i) * area;
                    blocks.push(Block {
                        kind: BlockKind::ConvKernel { in_ch: j, out_ch: i },
                        indices: (base..base + area).collect(),
                    });
                }
            }
            if layer.has_bias() {
                let base = j_ch * i_ch * area;
                blocks.push(Block {
                    kind: BlockKind::ConvBias,
                    indices: (base..base + i_ch).collect(),
                });
            }
            LayerPartition {
                blocks,
                shared: false,
            }
        }
    }
}

/// Partition every layer, switching dense layers to the shared statistic when
/// `O·(I+1)²` exceeds `spatial_avg_threshold`.
pub fn partition_network(spec: &NetworkSpec, spatial_avg_threshold: usize) -> MiniBlockPartition {
    let layers = spec
        .layers
        .iter()
        .map(|layer| {
            let spatial_avg = match layer {
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    let block_dim = in_dim + usize::from(layer.has_bias());
                    out_dim * block_dim * block_dim > spatial_avg_threshold
                }
                _ => false,
            };
            partition_layer(layer, spatial_avg)
        })
        .collect();
    MiniBlockPartition { layers }
}

/// Exact mini-block Fisher `(1/n)·J_bᵀJ_b` from per-sample Jacobian rows.
pub fn exact_miniblock_fisher(jacobian_rows: &Matrix) -> Matrix {
    let n = jacobian_rows.rows().max(1);
    let mut f = jacobian_rows.tmul(jacobian_rows);
    f.scale(1.0 / n as f64);
    f.symmetrize();
    f
}

/// Outer-product approximation `ḡ_b ḡ_bᵀ` of a mini-block Fisher.
pub fn approx_miniblock_fisher(batch_grad_slice: &[f64]) -> Matrix {
    let mut f = Matrix::zeros(batch_grad_slice.len(), batch_grad_slice.len());
    f.add_scaled_outer(1.0, batch_grad_slice);
    f
}

/// Spatially-averaged statistic `(1/O)·Σ_j ḡ_j ḡ_jᵀ` from the per-neuron
/// gradient rows of a dense layer.
pub fn spatial_average_fc(per_neuron_grads: &Matrix) -> Matrix {
    let o = per_neuron_grads.rows().max(1);
    let dim = per_neuron_grads.cols();
    let mut f = Matrix::zeros(dim, dim);
    for j in 0..per_neuron_grads.rows() {
        f.add_scaled_outer(1.0 / o as f64, per_neuron_grads.row(j));
    }
    f
}

/// EMA update `β·old + (1−β)·new`.
pub fn update_stats_ema(old: &Matrix, new: &Matrix, beta: f64) -> Result<Matrix> {
    if (old.rows(), old.cols()) != (new.rows(), new.cols()) {
        return Err(Error::ShapeMismatch {
            context: "update_stats_ema".into(),
            expected: (old.rows(), old.cols()),
            got: (new.rows(), new.cols()),
        });
    }
    let mut out = old.clone();
    out.scale(beta);
    out.add_scaled(1.0 - beta, new);
    Ok(out)
}

/// Desk-scale guard on the dense empirical Fisher.
pub const EMPIRICAL_FIM_MAX_PARAMS: usize = 3000;

/// Dense empirical Fisher `(1/n)·JᵀJ` over full per-sample gradient rows.
///
/// Only for tiny nets; larger parameter counts get a size error pointing at
/// the mini-block path.
pub fn empirical_fim(per_sample_grads: &Matrix) -> Result<Matrix> {
    let p = per_sample_grads.cols();
    if p > EMPIRICAL_FIM_MAX_PARAMS {
        return Err(Error::TooLarge {
            size: p,
            limit: EMPIRICAL_FIM_MAX_PARAMS,
        });
    }
    Ok(exact_miniblock_fisher(per_sample_grads))
}

/// In-block vs off-block absolute mass of a matrix under a partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRatio {
    pub in_block_mean_abs: f64,
    pub off_block_mean_abs: f64,
    /// `in/off`; infinite when the off-block mass is exactly zero.
    pub ratio: f64,
}

/// Measure how much of `|M|` lives inside the partition's blocks.
///
/// Index pairs belong to a block when both indices are in its index set; the
/// diagonal-only conv bias block contributes only its diagonal pairs. All
/// remaining pairs are off-block.
pub fn block_mass_ratio(m: &Matrix, blocks: &[Block]) -> Result<MassRatio> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch {
            context: "block_mass_ratio".into(),
            expected: (m.rows(), m.rows()),
            got: (m.rows(), m.cols()),
        });
    }
    let p = m.rows();
    let mut owner = vec![false; p];
    for block in blocks {
        for &i in &block.indices {
            if i >= p {
                return Err(Error::CoverageMismatch {
                    context: format!("block index {i} out of range for {p} parameters"),
                });
            }
            if owner[i] {
                return Err(Error::CoverageMismatch {
                    context: format!("parameter {i} covered twice"),
                });
            }
            owner[i] = true;
        }
    }
    if owner.iter().any(|&o| !o) {
        return Err(Error::CoverageMismatch {
            context: "partition does not cover every parameter".into(),
        });
    }

    let mut in_sum = 0.0;
    let mut in_count = 0usize;
    for block in blocks {
        match block.kind {
            BlockKind::ConvBias => {
                for &i in &block.indices {
                    in_sum += m.get(i, i).abs();
                    in_count += 1;
                }
            }
            _ => {
                for &i in &block.indices {
                    for &j in &block.indices {
                        in_sum += m.get(i, j).abs();
                        in_count += 1;
                    }
                }
            }
        }
    }
    let total_sum: f64 = m.data().iter().map(|v| v.abs()).sum();
    let total_count = p * p;
    let off_count = total_count - in_count;
    let in_mean = in_sum / in_count.max(1) as f64;
    let off_mean = if off_count == 0 {
        0.0
    } else {
        (total_sum - in_sum) / off_count as f64
    };
    let ratio = if off_mean == 0.0 {
        f64::INFINITY
    } else {
        in_mean / off_mean
    };
    Ok(MassRatio {
        in_block_mean_abs: in_mean,
        off_block_mean_abs: off_mean,
        ratio,
    })
}

/// Index permutation that lays the blocks out contiguously, in order.
pub fn block_permutation(blocks: &[Block]) -> Vec<usize> {
    blocks.iter().flat_map(|b| b.indices.iter().copied()).collect()
}

/// KFAC factors of a dense layer: input second moment `A` (bias-augmented)
/// and pre-activation-derivative second moment `Γ`.
#[derive(Debug, Clone)]
pub struct KfacFactors {
    pub input_moment: Matrix,
    pub deriv_moment: Matrix,
}

/// `A = (1/n)·Σ a aᵀ`, `Γ = (1/n)·Σ 𝒟h 𝒟hᵀ` from bias-augmented inputs and
/// per-sample pre-activation derivatives.
pub fn kfac_factors(inputs_augmented: &Matrix, preact_derivs: &Matrix) -> Result<KfacFactors> {
    if inputs_augmented.rows() != preact_derivs.rows() {
        return Err(Error::ShapeMismatch {
            context: "kfac_factors sample counts".into(),
            expected: (inputs_augmented.rows(), 0),
            got: (preact_derivs.rows(), 0),
        });
    }
    Ok(KfacFactors {
        input_moment: exact_miniblock_fisher(inputs_augmented),
        deriv_moment: exact_miniblock_fisher(preact_derivs),
    })
}

/// Append the homogeneous coordinate (a column of ones).
pub fn augment_ones(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + 1);
    for r in 0..a.rows() {
        let dst = out.row_mut(r);
        dst[..a.cols()].copy_from_slice(a.row(r));
        dst[a.cols()] = 1.0;
    }
    out
}

/// Kronecker product `A ⊗ B`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for ia in 0..a.rows() {
        for ja in 0..a.cols() {
            let av = a.get(ia, ja);
            if av == 0.0 {
                continue;
            }
            for ib in 0..b.rows() {
                for jb in 0..b.cols() {
                    out.set(ia * b.rows() + ib, ja * b.cols() + jb, av * b.get(ib, jb));
                }
            }
        }
    }
    out
}

/// EMA curvature block with its cached damped inverse and refresh
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct EmaBlock {
    pub ghat: Matrix,
    pub inverse: Matrix,
    pub stats_iteration: usize,
    pub inverse_iteration: usize,
}

impl EmaBlock {
    /// Zero statistics; the cached inverse starts at `(0 + λI)^{-1} = I/λ`.
    pub fn zeros(dim: usize, damping: f64) -> Result<Self> {
        if !(damping > 0.0) {
            return Err(Error::InvalidInput {
                context: format!("damping must be positive, got {damping}"),
            });
        }
        let mut inverse = Matrix::identity(dim);
        inverse.scale(1.0 / damping);
        Ok(EmaBlock {
            ghat: Matrix::zeros(dim, dim),
            inverse,
            stats_iteration: 0,
            inverse_iteration: 0,
        })
    }

    /// Statistics seeded from a warm-start estimate, inverse refreshed.
    pub fn warm(ghat: Matrix, damping: f64) -> Result<Self> {
        let inverse = crate::linalg::damped_inverse(&ghat, damping)?;
        Ok(EmaBlock {
            ghat,
            inverse,
            stats_iteration: 0,
            inverse_iteration: 0,
        })
    }

    pub fn update_stats(&mut self, fresh: &Matrix, beta: f64, iteration: usize) {
        self.ghat.scale(beta);
        self.ghat.add_scaled(1.0 - beta, fresh);
        self.stats_iteration = iteration;
    }

    pub fn refresh_inverse(&mut self, damping: f64, iteration: usize) -> Result<()> {
        self.inverse = crate::linalg::damped_inverse(&self.ghat, damping)?;
        self.inverse_iteration = iteration;
        Ok(())
    }
}

/// Diagonal EMA curvature (conv bias blocks): second moments and the
/// elementwise damped reciprocal.
#[derive(Debug, Clone)]
pub struct EmaDiagBlock {
    pub second_moments: Vec<f64>,
    pub inverse: Vec<f64>,
    pub stats_iteration: usize,
    pub inverse_iteration: usize,
}

impl EmaDiagBlock {
    pub fn zeros(dim: usize, damping: f64) -> Self {
        EmaDiagBlock {
            second_moments: vec![0.0; dim],
            inverse: vec![1.0 / damping; dim],
            stats_iteration: 0,
            inverse_iteration: 0,
        }
    }

    pub fn warm(second_moments: Vec<f64>, damping: f64) -> Self {
        let inverse = second_moments.iter().map(|&v| 1.0 / (v + damping)).collect();
        EmaDiagBlock {
            second_moments,
            inverse,
            stats_iteration: 0,
            inverse_iteration: 0,
        }
    }

    pub fn update_stats(&mut self, fresh: &[f64], beta: f64, iteration: usize) {
        for (v, &f) in self.second_moments.iter_mut().zip(fresh.iter()) {
            *v = beta * *v + (1.0 - beta) * f;
        }
        self.stats_iteration = iteration;
    }

    pub fn refresh_inverse(&mut self, damping: f64, iteration: usize) {
        for (inv, &v) in self.inverse.iter_mut().zip(self.second_moments.iter()) {
            *inv = 1.0 / (v + damping);
        }
        self.inverse_iteration = iteration;
    }
}
