//! Timeline summarisation engine.
//!
//! Articles are embedded and clustered into dated events, a reward is learned
//! from pairwise timeline preferences plus keywords, and a small token-level
//! policy is fine-tuned per event with actor-critic before the event summaries
//! are assembled into a timeline.
//!
//! Every model backend (sentence embeddings, language-model scorer, summary
//! policy) sits behind a trait with a deterministic in-process implementation
//! and an HTTP client for an external service.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluate;
pub mod event_detection;
pub mod gppl;
pub mod optim;
pub mod pipeline;
mod remote;
pub mod reward;
pub mod rl;
pub mod summarise;

pub use error::{Error, Result};
