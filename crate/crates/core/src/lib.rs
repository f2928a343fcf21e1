//! Architecture learning for small feed-forward networks.
//!
//! Every hidden dense neuron and every hidden convolutional feature map carries
//! a trainable *tri-state ReLU* gate: a width gate `w` (keep or drop the unit)
//! and a per-layer depth gate `d` (non-linear or linear). Gates are trained
//! jointly with the weights under a binarizing penalty `w(1 - w)` and a model
//! complexity penalty, then the network is cut down by [`surgery`]: zero-gated
//! units are removed and linear layers are folded into their successor.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, dataset loaders and
//! the command-line drivers live in the companion `archlearn` crate.
//!
//! Module map:
//!
//! - [`tensor`], [`rng`], [`svd`]: dense arithmetic, a seeded SplitMix64
//!   generator, and one-sided Jacobi SVD.
//! - [`nn`]: layers, gates, forward/backward, loss, gradient checking.
//! - [`learn`]: regularizers, gate clipping, SGD, the training loop and the
//!   hyper-parameter heuristics.
//! - [`surgery`]: width pruning, depth collapse, SVD compression, parameter
//!   counting and forward-equivalence checks.
//! - [`arch`]: the architecture mini-language (`conv:20x5x5 pool:2 fc:500 out:10`).
//! - [`data`]: in-memory datasets, class filtering and synthetic blobs.
#![no_std]
// index loops mirror the math in the kernels
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod arch;
pub mod data;
mod error;
pub mod learn;
pub mod nn;
pub mod rng;
pub mod surgery;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
