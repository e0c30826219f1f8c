//! Sparsely-gated mixture of relation experts for video visual relation
//! detection, with a synthetic relation world and the tagging/detection
//! metric suite.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod gate;
pub mod rng;
pub mod features;
pub mod expert;
pub mod model;
pub mod eval;
pub mod data;
pub mod synth;
pub mod pipeline;
pub mod config;
pub mod analysis;
pub mod cli;
