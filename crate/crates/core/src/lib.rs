//! Multi-instance contrastive learning for imbalanced bag classification.
//!
//! The model encodes each instance, diffuses features across instances through
//! a learned adjacency ([`geiim`]), runs a weight-gated recurrent cell with
//! self-attention over the instance sequence ([`wian`]), and is trained with a
//! class-weighted multi-scale contrastive loss plus cross-entropy ([`mccl`]).
//! Everything runs on a small reverse-mode autodiff [`tape`] over `f64` tensors.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geiim;
pub mod gradcheck;
pub mod gradsuite;
pub mod mccl;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wian;

pub use checkpoint::Checkpoint;
pub use config::{LossMode, TrainConfig};
pub use data::{Bag, Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, ModelParams};
pub use optim::OptimConfig;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
