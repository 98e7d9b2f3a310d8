//! Minimal reverse-mode training core: dense and 2-D convolutional layers,
//! batch and per-sample gradients, and the loss functions used by the
//! benchmarks.

mod loss;
mod pass;
mod types;

pub use loss::loss_eval;
pub use pass::{backward, backward_with_deltas, concat_layer_jacobians, forward, per_sample_gradients};
pub use types::{
    init_params, Activation, Batch, LayerParams, LayerSpec, LossKind, NetworkSpec, Params, Tape,
};
