//! Sample-based distributional regression: networks that emit sets of
//! samples, trained with the energy score plus an optional Sinkhorn shape
//! regularizer.

pub mod cli;
pub mod data;
pub mod diffmath;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod scoring;
pub mod summaries;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
