//! Multi-agent Waterfall process orchestration and evaluation harness for
//! class-level code generation.
//!
//! The crate is organised along the pipeline a grid run follows:
//!
//! - [`corpus`] loads and validates benchmark tasks.
//! - [`agents`] renders role prompts and extracts code from model output.
//! - [`gateway`] talks to models (live, replayed from a cassette, or scripted).
//! - [`process`] turns a process variant into an activity graph and drives a task through it.
//! - [`exec`] runs candidate code against a test suite through the runner protocol.
//! - [`metrics`] computes Pass@k, ncLOC and issue densities.
//! - [`analysis`] builds error-frequency tables and failure-taxonomy matrices.
//! - [`report`], [`config`] and [`grid`] back the command-line driver.

pub mod agents;
pub mod analysis;
pub mod artifact;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod exec;
pub mod gateway;
pub mod grid;
pub mod metrics;
pub mod process;
pub mod pysrc;
pub mod report;

pub use artifact::{ArtifactDocument, DocumentKind};
pub use corpus::{Corpus, TaskSpec};
pub use process::{ProcessVariant, RunRecord};

