//! Encoder-decoder Transformers with attention-map distillation through
//! trainable alignment modules.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod train;
pub mod transformer;

pub use data::{Batch, ParallelCorpus, TaskKind, Vocab};
pub use distill::{AamParams, AamShape, DistillConfig};
pub use error::{Error, Result};
pub use numerics::{ParamSet, Tape, Tensor, Var};
pub use train::{EpochMetrics, TrainConfig};
pub use transformer::{AttentionKind, Model, ModelConfig};
