//! Recovery of independent latent sources from multi-subject voxel time
//! series, sparse root-proximal spatial maps, and sparse symptom axes.

pub mod axis;
pub mod config;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod linalg;
pub mod pipeline;
pub mod rootmap;
pub mod simulator;

pub use error::{Error, Result};
