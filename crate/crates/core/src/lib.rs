//! Cross-teacher training for semi-supervised semantic segmentation.
//!
//! Pairs of student/teacher networks where each student learns from the
//! *other* pairs' EMA teachers, plus per-class feature memory banks feeding
//! a high-confidence and a low-confidence pixel contrastive loss.
//!
//! Module map:
//! - [`data`]: procedural shape dataset, splits, augmentation, on-disk format
//! - [`model`]: encoder/decoder network, backward pass, EMA teachers
//! - [`bank`]: per-class FIFO feature queues and candidate selection
//! - [`losses`]: cross-entropy family and the two contrastive kernels
//! - [`trainer`]: the training loop, baseline topologies, metrics log
//! - [`eval`]: confusion matrix, mIoU, feature export
//! - [`checkpoint`]: single-file archive of parameters, banks and state

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use bank::{compute_k, select_candidates, CandidateFeature, MemoryBank, Selection};
pub use config::{Topology, TrainConfig};
pub use data::{Sample, SceneSpec, SplitSpec, IGNORE};
pub use error::{Error, Result};
pub use eval::ConfusionMatrix;
pub use losses::{BinaryMask, ContrastConfig, LossComponents, LossWeights};
pub use model::{BackboneConfig, ForwardOutput, ImageBatch, ModelParams, StudentTeacherPair};
pub use tensor::{Matrix, Real};

pub use trainer::{run, run_baseline_topology, MetricsRecord, RunOutput, TrainData, Trainer};
