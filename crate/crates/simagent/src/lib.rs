//! File formats, experiment config, plotting and the command pipeline for
//! `simagent-core`.

pub mod artifact;
pub mod checkpoint;
pub mod clock;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;

pub use error::{Error, Result};
