//! Multi-modal (RGB / depth / IR) face anti-spoofing.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: manifest ingestion, synthetic data generation, train/val splits.
//! - [`augment`]: colour-space conversion, patch cropping and modal dropout.
//! - [`nn`]: a small CPU tensor engine with hand-written backward passes.
//! - [`model`]: squeeze-and-excitation bottleneck blocks assembled into
//!   per-modality pipelines and a fusion classifier.
//! - [`schedule`]: cosine decay with restarts and a dynamic per-cycle start.
//! - [`trainer`]: SGD training loop and top-k checkpoint retention.
//! - [`lfv`]: limited frame vote video aggregation and simple baselines.
//! - [`metrics`]: APCER / BPCER / ACER and protocol aggregation.
//! - [`eval`]: video-level evaluation, frame order probe, portfolio sweep.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod lfv;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod schedule;
pub mod trainer;

pub use augment::{AugmentConfig, ColorMode, PatchTriplet};
pub use dataset::{DatasetIndex, Label, SampleRef, SubProtocol, SyntheticSpec, VideoSample};
pub use eval::{EvalConfig, EvalOutcome, VideoPrediction};
pub use lfv::{LfvConfig, Termination, VoteResult};
pub use metrics::{AggregateMetrics, ConfusionCounts, ProtocolMetrics};
pub use modality::{ModalityId, PerModality};
pub use model::{ModelHandle, PortfolioSpec};
pub use schedule::{ScheduleConfig, ScheduleState};
pub use trainer::{CheckpointRecord, TrainConfig, TrainingReport};
