//! Volumetric brain extraction: a Monte Carlo dropout encoder-decoder that
//! produces per-voxel label probabilities and model uncertainty, a fully
//! connected 3D CRF that refines those probabilities, and the evaluation
//! metrics and statistics used to compare segmentations.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and experiment orchestration live in the `brainex` companion crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod bayesnet;
pub mod densecrf;
mod error;
mod linalg;
pub mod math;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Axis, Grid, LabelVolume, ProbVolume, UncertaintyVolume, Volume3D};
