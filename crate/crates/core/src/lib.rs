//! Few-shot, prompt-conditioned image restoration with low-rank adapters on
//! a small rectified-flow transformer.
//!
//! The pipeline: [`degrade`] synthesizes paired data, [`train`] fits an
//! adapter (or a whole base model) with the [`flow`] objective, [`sampler`]
//! restores images by guided Euler integration, and [`metrics`] scores the
//! results. Everything runs on the reverse-mode [`tensor`] engine in `f64`.

pub mod config;
pub mod container;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod text;
pub mod train;

pub use config::{DataConfig, RunConfig};
pub use degrade::{DegradationSpec, PairRecord, PairedDataset, Split, Task};
pub use error::{Error, Result};
pub use flow::{FlowBatch, FlowSample, TimestepSampler};
pub use lora::{LoraAdapter, LoraSpec, SiteFilter, TaskTag};
pub use metrics::{EvalConfig, FeatureExtractor, MetricReport, MetricRow};
pub use model::{FlowTransformer, ModelConfig};
pub use sampler::{Pipeline, SampleConfig};
pub use tensor::{Tape, Tensor, Var};
pub use text::{PromptVocab, TextEmbedder};
pub use train::{Checkpoint, Regime, TrainConfig, TrainMode, Trainer};
