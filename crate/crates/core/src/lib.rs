//! Coarse-to-fine text-video retrieval with query indicators.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: dense arrays, a reverse-mode tape, attention and the
//!   finite-difference gradient checker.
//! - [`encoders`]: tiny text and video encoders with query-indicator binding.
//! - [`retrieval`]: broad-view scoring, top-k selection, focused-view fusion
//!   and score composition.
//! - [`training`]: contrastive and focused losses, the AdamW loop.
//! - [`metrics`]: R@k, median and mean rank.
//! - [`data`]: synthetic hard-negative pairs and on-disk formats.
//! - [`config`]: the flat key-value run configuration.
//! - [`experiment`]: end-to-end train/evaluate runs and ablation sweeps.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod retrieval;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use numeric::{DenseArray, Group, ParameterSet, RngStream, Tape, Var};
