//! Mini-block Fisher preconditioned optimizers on a self-contained
//! neural-network training core.
//!
//! The crate is organized around six pieces:
//!
//! - [`linalg`] — dense symmetric linear algebra (damped inverses, Jacobi
//!   eigendecomposition, coupled-Newton inverse p-th roots);
//! - [`nn`] — dense and 2-D convolutional layers with reverse-mode batch and
//!   per-sample gradients;
//! - [`fisher`] — mini-block partitions, exact and approximate mini-block
//!   Fisher statistics, the dense empirical Fisher oracle, and KFAC factors;
//! - [`optim`] — SGD-m, Adam, mini-block Fisher (practical and exact
//!   per-sample variants), KFAC for fully-connected layers, and Shampoo;
//! - [`convergence`] — a harness that measures the curvature constants of an
//!   exact-gradient run and checks the linear residual-decay bound;
//! - [`harness`] — datasets (IDX files and synthetic generators), configured
//!   training runs, grid search, heatmap export and storage audits.
//!
//! Per-block work (statistics refreshes, inversions, preconditioning) runs as
//! an ordered data-parallel map over blocks — rayon-backed under the default
//! `parallel` feature, sequential without it — with results always assembled
//! in block order so runs are bit-reproducible either way.

pub mod convergence;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod parallel;

pub use error::{Error, Result};
