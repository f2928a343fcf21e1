use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("no convergence after {sweeps} sweeps (residual {residual:e})")]
    IterationLimit { sweeps: usize, residual: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("forward cache is stale: produced at generation {cache}, network is at {network}")]
    StaleCache { cache: u64, network: u64 },
    #[error("layer {layer} annihilated: every width gate is zero")]
    LayerAnnihilated { layer: usize },
    #[error("invalid surgery plan: {0}")]
    Plan(String),
    #[error("rank {rank} out of range 1..={max}")]
    Rank { rank: usize, max: usize },
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: u64, what: String },
    #[error("empty dataset split: {0}")]
    EmptySplit(String),
    #[error("architecture spec: {0}")]
    ArchSpec(String),
}

pub type Result<T> = core::result::Result<T, Error>;
