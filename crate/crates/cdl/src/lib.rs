//! Early-exit convolutional classification.
//!
//! A small convolutional network is trained from scratch; per-stage linear
//! classifiers are then attached to its pooling layers where a cost/benefit
//! gain criterion admits them, and inference walks the stages in order,
//! stopping as soon as one classifier is confident enough about exactly one
//! class. Easy inputs leave early and cheap; hard inputs fall through to
//! the full network. An explicit operation-count model prices every exit
//! path, so accuracy/efficiency tradeoffs are measurable rather than
//! estimated.
//!
//! The crate is organized around that pipeline:
//!
//! - [`tensor`]: dense tensor primitives (valid convolution, max pooling,
//!   fully connected transforms, sigmoid) and their gradients.
//! - [`network`]: baseline topologies, forward traces, SGD training.
//! - [`cascade`]: per-stage linear classifiers, instance routing, and the
//!   gain criterion that decides which stages to keep.
//! - [`inference`]: the early-exit decision rule and classification.
//! - [`metrics`]: the operation-count cost model, evaluation reports, and
//!   the threshold/stage-count sweeps.
//! - [`data`]: IDX dataset ingestion and a synthetic demo set.
//! - [`model_io`]: versioned, checksummed binary persistence.
//! - [`config`] and [`commands`]: the `cdl` command-line front end.
//!
//! The `examples/` directory exercises each capability end to end; every
//! example runs on a built-in synthetic dataset by default and switches to
//! real data when `CDL_DATA_DIR` points at the IDX files.

pub mod cascade;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model_io;
pub mod network;
pub mod tensor;

pub use cascade::{build_cascade, BuildOptions, Cascade, LinearClassifier, StageStats};
pub use data::Dataset;
pub use error::{CdlError, Result};
pub use inference::{activation_decision, classify, classify_batch, ClassificationResult, ExitDecision, ExitPoint};
pub use metrics::{evaluate, CostModel, CostTable, EvalOptions, EvaluationReport, OpCount};
pub use model_io::{load_model, save_model, ModelContainer};
pub use network::{build_network, forward, predict, train, NetworkSpec, TrainOptions, TrainedNetwork};
pub use tensor::Tensor;
