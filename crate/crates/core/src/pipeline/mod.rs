//! Training runs, probes and the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod finetune;
pub mod train;

pub use config::{DatasetSpec, PipelineKind, PretrainConfig, ScheduleConfig, SyntheticSpec};
pub use data::{load_samples, TokenizedSet};
pub use eval::{evaluate_objective, retrieval_top1};
pub use finetune::{finetune, FinetuneReport, Probe, ProbeConfig, ProbeInit, ProbeTask};
pub use train::{initial_model, load_model, pretrain, pretrain_image, pretrain_video, Handoff, MetricsRow, RunOutput, Stage};
