//! File formats, configuration and orchestration around `brainex-core`:
//! NIfTI-1 I/O, phantom datasets with cross-validation folds, the
//! train/predict/refine/evaluate stages, uncertainty experiments and the
//! `brainex` command line.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod nifti;
pub mod pipeline;
pub mod report;
pub mod seeds;

pub use config::PipelineConfig;
pub use error::{Error, Result};
