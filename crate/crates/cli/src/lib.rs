//! Stage-artifact pipeline around the `competency` crate.
//!
//! Each stage reads its upstream artifacts from a working directory, writes
//! its own as JSON (or a binary dataset / JSON-lines log) tagged with the
//! config hash, and records a manifest of input and output SHA-256 hashes.

pub mod artifact;
pub mod config;
pub mod error;
pub mod stages;

pub use artifact::{Artifact, Manifest, Workdir, ARTIFACT_VERSION};
pub use config::{PipelineConfig, Stage};
pub use error::{CliError, CliResult};
pub use stages::{run_pipeline, run_stage, verify_provenance, Context};
