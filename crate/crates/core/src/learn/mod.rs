//! Regularized training of gated networks.

mod hyper;
mod optim;
mod regularizer;
mod train;

pub use hyper::{complexity_norm, suggest_lambdas, suggest_lambdas_with_ratio, WIDTH_BINARIZE_RATIO};
pub use optim::{sgd_step, LayerVelocity, Momentum, StepSizes};
pub use regularizer::{
    binarizing_penalty, clip_gates, effective_width, model_complexity_penalty, regularizer_grads, BinarizingPenalty,
    GateGrad, RegConfig, DEFAULT_STEP_CLIP,
};
pub use train::{binarized_phi, evaluate, train, MetricsRecord, StepDecay, TrainConfig, TrainState, Trainer};
