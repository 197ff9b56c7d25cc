//! Run orchestration: one subcommand per workflow stage, state persisted in a
//! run directory between invocations, and the annotation HTTP service.
//!
//! Stages are gated. A command whose predecessor has not completed fails with
//! [`Error::Stage`](crate::Error::Stage) before touching the run directory.

mod commands;
pub mod config;
pub mod server;
pub mod state;
pub mod store;

pub use commands::*;
pub use config::{Ablation, PipelineConfig, TrainVariant};
pub use server::{annotation_router, cmd_serve, AnnotationTask, StatusResponse};
pub use state::{PipelineState, Run, Stage};
pub use store::{KeywordRecord, PreferenceRecord, PreferenceStore};
