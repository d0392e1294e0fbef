//! Depth pruning for small modulation-classification CNNs.
//!
//! The pipeline partitions a trained network's units into contiguous blocks
//! by representation similarity ([`similarity`], [`partition`]), picks the
//! units to keep in each block with a data-free proxy ([`selection`]), then
//! rebuilds and fine-tunes the compact network ([`rebuild`]).

pub mod error;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod signal;
pub mod partition;
pub mod pipeline;
pub mod rebuild;
pub mod similarity;

pub use error::{Error, Result};
