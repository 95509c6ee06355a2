//! Toolkit for evaluating forensic mugshot augmentation pipelines.
//!
//! The crate covers the measurable parts of an enhancement → description →
//! augmentation workflow:
//!
//! - [`attribute`]: forensic attribute categories, records and normalization.
//! - [`metric`]: the semantic Hamming-like distance between ground truth and
//!   predicted descriptions, and cohort accuracy tables.
//! - [`tv`]: total-variation denoising on gray and RGB rasters, with
//!   [`imageio`] for PGM/PNG files.
//! - [`prompt`]: VLM questions, generation prompts and aging prompts.
//! - [`reid`]: embedding distances, confusion matrices, identification and
//!   verification metrics.
//! - [`gateway`]: client contract for the external models, with HTTP and
//!   fixture-directory backends and a provenance journal.
//! - [`pipeline`]: the experiment runner behind the `mugshot` binary.
//! - [`demo`]: a synthetic dataset plus fixtures for fully offline runs.
//!
//! Runnable walkthroughs for each part live under `examples/`.

pub mod attribute;
pub mod demo;
pub mod error;
pub mod gateway;
pub mod imageio;
pub mod metric;
pub mod pipeline;
pub mod prompt;
pub mod reid;
pub mod tv;

pub use error::{Error, Result};
