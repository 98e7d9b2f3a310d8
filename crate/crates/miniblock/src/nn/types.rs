//! Network description and parameter containers.
//!
//! Layer parameters use one canonical flat ordering throughout the crate
//! (gradients, Jacobian rows, Fisher blocks and partitions all agree on it):
//!
//! - dense: the `in_dim × out_dim` weight matrix row-major (input-major),
//!   then the bias vector;
//! - conv2d: kernels in `(input channel, output channel, offset)` order with
//!   the `(2R+1)²` offsets row-major, then the bias vector.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One layer of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "default_true")]
        has_bias: bool,
        activation: Activation,
    },
    /// 2-D convolution with stride 1 and padding `radius`, so the input and
    /// output spatial grids coincide. Kernel side is `2·radius + 1`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        radius: usize,
        height: usize,
        width: usize,
        #[serde(default = "default_true")]
        has_bias: bool,
        activation: Activation,
    },
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                *activation
            }
        }
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerSpec::Dense { has_bias, .. } | LayerSpec::Conv2d { has_bias, .. } => *has_bias,
        }
    }

    /// Flattened input width seen by the layer.
    pub fn in_flat(&self) -> usize {
        match self {
            LayerSpec::Dense { in_dim, .. } => *in_dim,
            LayerSpec::Conv2d {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    /// Flattened output width produced by the layer.
    pub fn out_flat(&self) -> usize {
        match self {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            LayerSpec::Conv2d {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
        }
    }

    /// Kernel footprint `(2R+1)²` for conv layers.
    pub fn kernel_area(&self) -> usize {
        match self {
            LayerSpec::Dense { .. } => 0,
            LayerSpec::Conv2d { radius, .. } => (2 * radius + 1) * (2 * radius + 1),
        }
    }

    pub fn weight_len(&self) -> usize {
        match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => in_dim * out_dim,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => in_channels * out_channels * self.kernel_area(),
        }
    }

    pub fn bias_len(&self) -> usize {
        if !self.has_bias() {
            return 0;
        }
        match self {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            LayerSpec::Conv2d { out_channels, .. } => *out_channels,
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => *in_dim >= 1 && *out_dim >= 1,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                ..
            } => *in_channels >= 1 && *out_channels >= 1 && *height >= 1 && *width >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                context: "layer dimensions must be at least 1".into(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    BceWithSigmoid,
    SoftmaxCe,
}

/// Layer topology plus the loss attached to the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        let spec = NetworkSpec { layers, loss };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config {
                context: "network needs at least one layer".into(),
            });
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_flat() != pair[1].in_flat() {
                return Err(Error::Config {
                    context: format!(
                        "layer {} produces {} values but layer {} expects {}",
                        l,
                        pair[0].out_flat(),
                        l + 1,
                        pair[1].in_flat()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_flat()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_flat()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_len()).sum()
    }
}

/// Parameter values for one layer in the canonical flat ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(spec: &LayerSpec) -> Self {
        LayerParams {
            weights: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.bias_len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weights.len() + self.bias.len());
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn from_flat(spec: &LayerSpec, flat: &[f64]) -> Self {
        let wl = spec.weight_len();
        LayerParams {
            weights: flat[..wl].to_vec(),
            bias: flat[wl..].to_vec(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &LayerParams) {
        for (a, &b) in self.weights.iter_mut().zip(other.weights.iter()) {
            *a += alpha * b;
        }
        for (a, &b) in self.bias.iter_mut().zip(other.bias.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// Dense weights viewed as an `in_dim × out_dim` matrix (copies).
    pub(crate) fn dense_weight_matrix(&self, spec: &LayerSpec) -> Matrix {
        match spec {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                Matrix::from_raw(*in_dim, *out_dim, self.weights.clone())
            }
            _ => panic!("dense_weight_matrix on conv layer"),
        }
    }
}

/// All network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Params {
            layers: spec.layers.iter().map(LayerParams::zeros).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.axpy(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    /// Euclidean distance to another parameter vector.
    pub fn distance(&self, other: &Params) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(other.layers.iter()) {
            for (&x, &y) in a.weights.iter().zip(b.weights.iter()) {
                acc += (x - y) * (x - y);
            }
            for (&x, &y) in a.bias.iter().zip(b.bias.iter()) {
                acc += (x - y) * (x - y);
            }
        }
        acc.sqrt()
    }
}

/// Per-layer activations recorded by the forward pass: the input each layer
/// saw and the pre-activations it produced, for the current batch.
#[derive(Debug, Clone)]
pub struct Tape {
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.rows())
    }
}

/// Input/target pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Inconsistent {
                context: format!("{} inputs vs {} targets", x.rows(), y.rows()),
            });
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Row subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut x = Matrix::zeros(idx.len(), self.x.cols());
        let mut y = Matrix::zeros(idx.len(), self.y.cols());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
            y.row_mut(r).copy_from_slice(self.y.row(i));
        }
        Batch { x, y }
    }
}

/// Deterministic parameter initialization: He-uniform fan-in scaling for
/// relu layers, Glorot-uniform for everything else; biases start at zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|layer| {
            let (fan_in, fan_out) = match layer {
                LayerSpec::Dense { in_dim, out_dim, .. } => (*in_dim, *out_dim),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    ..
                } => (
                    in_channels * layer.kernel_area(),
                    out_channels * layer.kernel_area(),
                ),
            };
            let limit = match layer.activation() {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let weights = (0..layer.weight_len())
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            LayerParams {
                weights,
                bias: vec![0.0; layer.bias_len()],
            }
        })
        .collect();
    Params { layers }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: usize, o: usize, act: Activation) -> LayerSpec {
        LayerSpec::Dense {
            in_dim: i,
            out_dim: o,
            has_bias: true,
            activation: act,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::new(
            vec![dense(4, 3, Activation::Relu), dense(3, 2, Activation::Tanh)],
            LossKind::SquaredError,
        )
        .unwrap();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a, b);
        let c = init_params(&spec, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_match_first_autoencoder_layer() {
        let spec = NetworkSpec::new(
            vec![dense(784, 1000, Activation::Relu)],
            LossKind::SquaredError,
        )
        .unwrap();
        let p = init_params(&spec, 0);
        assert_eq!(p.layers[0].weights.len(), 784 * 1000);
        assert_eq!(p.layers[0].bias.len(), 1000);
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn relu_init_variance_is_he() {
        // empirical variance of He-uniform weights should be close to 2/fan_in
        let spec = NetworkSpec::new(
            vec![dense(100, 100, Activation::Relu)],
            LossKind::SquaredError,
        )
        .unwrap();
        let p = init_params(&spec, 3);
        let w = &p.layers[0].weights;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 100.0;
        assert!(
            (var - target).abs() < 0.2 * target,
            "variance {var} not within 20% of {target}"
        );
    }

    #[test]
    fn adjacent_dims_validated() {
        let bad = NetworkSpec::new(
            vec![dense(4, 3, Activation::Relu), dense(4, 2, Activation::Tanh)],
            LossKind::SquaredError,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn conv_spatial_shape_matches_input() {
        // stride 1, padding R: spatial grids coincide
        let layer = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 2,
            radius: 1,
            height: 5,
            width: 7,
            has_bias: true,
            activation: Activation::Relu,
        };
        assert_eq!(layer.in_flat(), 3 * 35);
        assert_eq!(layer.out_flat(), 2 * 35);
        assert_eq!(layer.kernel_area(), 9);
        assert_eq!(layer.weight_len(), 3 * 2 * 9);
    }
}
