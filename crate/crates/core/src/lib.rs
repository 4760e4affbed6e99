//! Low-shot skin-lesion classification benchmark library.
//!
//! The crate is organised around the stages of a benchmark run:
//!
//! - [`data`]: dataset ingestion, deterministic splits, per-class shot
//!   subsampling and the augmentations used by the self-supervised encoder.
//! - [`nn`]: a small CPU tensor/network toolkit (convolutions, batch norm,
//!   residual blocks, Adam) used by both encoder families.
//! - [`encoder`]: discriminative and self-supervised (mutual-information
//!   contrastive) encoders producing local feature maps and global embeddings.
//! - [`heads`]: the four classification strategies compared by the benchmark
//!   (KNN, random forest, RBF SVM, end-to-end fine-tuning).
//! - [`bench`]: the sweep runner producing shots x methods x seeds accuracy
//!   matrices, tables and curves.
//! - [`fairness`]: skin-tone estimation via the individual typology angle and
//!   per-subgroup performance reports.
//! - [`config`]: declarative run configuration with strict validation.
//! - [`synth`]: synthetic image corpora for smoke tests and desk-scale runs.

pub mod bench;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fairness;
pub mod heads;
pub mod nn;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
