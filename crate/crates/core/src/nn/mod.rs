//! Layers, the model graph, forward/backward passes and losses.

pub mod arch;
mod graph;
mod kernels;
pub mod loss;

pub use arch::{zoo, Architecture, FeatureShape, LayerShapes, LayerSpec};
pub use graph::{BatchActivations, Gradients, LayerGrads, LayerParams, Mode, ModelGraph};
pub use loss::{cross_entropy, AuxForm, AuxLoss};

pub(crate) use graph::expected_param_shapes;
