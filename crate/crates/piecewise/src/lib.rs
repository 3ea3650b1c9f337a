//! Unsupervised training of confident, smooth discriminative models.
//!
//! The library trains a multilayer perceptron without any labels by
//! combining two regularizers:
//!
//! * a **confidence loss** that treats the model as the encoder/decoder of a
//!   label-transmission game over a batch and penalizes imperfect
//!   round-trips, pushing predictions toward confident, label-complete
//!   assignments; and
//! * a **smoothness loss** that probes each instance along directions drawn
//!   from powers of its Fisher information and penalizes output divergence
//!   within a small input ball, pushing the model toward locally constant
//!   behavior.
//!
//! Together the two drive the model toward a non-trivial piecewise-constant
//! function whose plateaus align with data clusters. Everything runs on a
//! small, self-contained reverse-mode autodiff engine over dense `f64`
//! matrices ([`graph`]), with evaluation utilities (optimal-assignment
//! clustering accuracy, stability statistics, heatmap grids) and a CLI on
//! top.
//!
//! Start with [`data`] to build a dataset, [`model`] to define and
//! initialize an MLP, [`trainer::train`] to fit it, and [`eval`] to score
//! the result.

pub mod cli;
pub mod confidence;
pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod smoothness;
pub mod tensor;
pub mod trainer;
pub mod transmission;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Probability floor applied before any logarithm (and as the dead-column
/// threshold when normalizing over a batch). Keeps every loss and gradient
/// finite even for collapsed models.
pub const PROB_EPS: f64 = 1e-8;

/// Offset added to batch variances before the normalization square root.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the batch-normalization running statistics: after each
/// training-mode forward pass, `running = (1 - M) * running + M * batch`.
pub const BN_MOMENTUM: f64 = 0.1;
