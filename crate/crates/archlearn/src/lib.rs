//! File formats, dataset loaders and experiment drivers for `archlearn-core`.
//!
//! - [`idx`]: MNIST IDX parsing and the standard train/val/test splits.
//! - [`checkpoint`]: the `ALNCKPT1` network + optimizer-state container.
//! - [`metrics`]: metrics timeline CSV with a provenance header.
//! - [`config`]: JSON experiment configs, `--set` overrides and config hashing.
//! - [`commands`]: the subcommands behind the `archlearn` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod idx;
pub mod metrics;

pub use error::{AppError, AppResult};
