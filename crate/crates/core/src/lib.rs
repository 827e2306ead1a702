//! Curriculum multi-task self-supervised pretraining for hyperspectral cubes.
//!
//! The crate is organised along the pipeline:
//!
//! * [`data`]: scene containers, tiling into cubes, per-band normalization.
//! * [`difficulty`]: 3D gradient-magnitude difficulty scores and correlation analysis.
//! * [`curriculum`]: cumulative easy-to-hard stages and the geometric epoch schedule.
//! * [`pretext`]: spatial jigsaw, spectral jigsaw and masked-cube generation.
//! * [`nn`] and [`model`]: a small CNN toolkit, the shared encoder and task heads.
//! * [`training`]: losses, the multi-task pretraining loop and fine-tuning.
//! * [`evaluation`]: OA / AA / Kappa and multi-seed aggregation.
//! * [`synthetic`]: synthetic labelled scenes with controllable texture.
//! * [`config`], [`experiment`] and [`cli`]: run configuration, comparison and
//!   sweep harnesses, and the `cmtssl` command line.

pub mod cli;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod difficulty;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod pretext;
pub mod report;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
