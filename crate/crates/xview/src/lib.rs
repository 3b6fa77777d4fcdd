//! Cross-view (ego/exo) imitation-error detection.
//!
//! The pipeline aligns a first-person imitation against a third-person
//! demonstration, fuses the two streams, and detects procedural steps on the
//! first-person timeline together with a per-step error judgement. Everything
//! is trainable end to end on a small autodiff substrate and testable on a
//! synthetic paired-sequence benchmark without any video data.

pub mod checks;
pub mod config;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod eval;
pub mod fusion;
pub mod sampler;
pub mod sve;
pub mod synth;
pub mod types;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Non-fatal diagnostics (degenerate inputs handled by an epsilon floor,
/// reduced level counts, and the like) go to stderr.
pub fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}
