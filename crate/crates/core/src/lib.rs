//! Multi-scale predictive-coding video prediction.
//!
//! An `L`-level coarse-to-fine hierarchy of encoder-decoder LSTM cells: each
//! step runs a top-down pass that produces per-level predictions and a
//! bottom-up pass that turns the mismatch with the (down-sampled) frame into
//! positive/negative error maps for the next step.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod trainer;

pub use error::{Error, Result};

pub use candle_core::{DType, Device, Tensor};
pub use config::{ExperimentConfig, ExitCheck};
pub use data::{SequenceDataset, SplitManifest};
pub use metrics::{evaluate, CopyLastFrame, MetricReport, Predictor, Protocol};
pub use network::{Mspn, NetworkConfig, Rollout, RolloutMode};
pub use trainer::{latest_checkpoint, load_generator, Trainer, TrainSummary};
