//! Conditional adaptive instance modulation for cross-modality face
//! matching: a small f64 autodiff engine, the CAIM block, a frozen
//! convolutional backbone, a contrastive trainer, a synthetic two-modality
//! dataset and verification metrics.

pub mod autodiff;
pub mod backbone;
pub mod block;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use backbone::{build_backbone, insert_caim, insert_caim_with_mode, BackboneConfig, ModelAssembly};
pub use block::{BlockMode, CaimParams, Gate};
pub use config::RunConfig;
pub use data::{make_dataset, DatasetBundle, DatasetConfig, Modality, Split};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricsReport, ScoreSet};
pub use tensor::Tensor;
pub use trainer::{train_caim, TrainConfig};
