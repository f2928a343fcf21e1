//! Layers, tri-state ReLU gates, the network container and backpropagation.

mod gate;
mod gradcheck;
mod layer;
mod loss;
mod network;

pub use gate::{binarize, tsrelu_apply, BinaryGates, GateParams};
pub use gradcheck::{grad_check, GradCheckReport, GroupError};
pub use layer::{Conv2dLayer, DenseLayer, Layer, MaxPoolLayer, Shape3};
pub use loss::softmax_xent;
pub use network::{ForwardCache, Gradients, Network, ParamGrads, SteCounterpart};
