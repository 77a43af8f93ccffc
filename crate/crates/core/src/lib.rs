//! Unsupervised deblurring of domain-specific images (faces, text) by
//! disentangling content and blur representations from unpaired data.

pub mod blur;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod glyphs;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
