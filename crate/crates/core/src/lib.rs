//! Sparse-keyframe video object detection on a scale-time lattice.
//!
//! Expensive detection runs on a few key frames; results are carried to the
//! remaining frames by cheap temporal propagation (motion history features)
//! and refined coarse-to-fine across image scales. The crate simulates the
//! whole pipeline on synthetic video so that accuracy/cost tradeoffs can be
//! measured end to end.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geom;
pub mod lattice;
pub mod motion;
pub mod pipeline;
pub mod pru;
pub mod synth;
pub mod tube;

pub use error::{Error, Result};
