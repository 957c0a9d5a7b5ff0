//! Conditional adversarial downscaling of near-surface wind fields.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod preprocess;
pub mod spectral;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
