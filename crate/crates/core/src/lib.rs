//! Stability-based structured filter pruning for small CNNs.
//!
//! Filters are ranked by how much their absolute mass moves when the network
//! is briefly trained with an auxiliary penalty that pulls every conv weight
//! toward ±1. The least stable filters are removed together with every slice
//! that depends on them, and [`analyzer`] reports FLOPS, parameters and
//! run-time memory before and after.

pub mod analyzer;
pub mod dataio;
pub mod error;
pub mod nn;
pub mod pruner;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use analyzer::{CompressionSummary, CostReport, LayerCost};
pub use dataio::{Checkpoint, CheckpointMeta, Dataset, Split};
pub use error::{Error, Result};
pub use nn::{zoo, Architecture, AuxForm, LayerSpec, Mode, ModelGraph};
pub use pruner::{Criterion, ImportanceReport, PruneHooks, PruneSchedule, PrunedSet};
pub use tensor::{DType, Distribution, Element, Tensor};
pub use trainer::{LossMode, TrainConfig, TrainReport};
