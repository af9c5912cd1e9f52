//! Lifelong multilingual sequence-to-frame training engine.
//!
//! Languages arrive one at a time. Each stage trains on the current task plus a
//! small language-balanced memory buffer of earlier tasks, using one of several
//! strategies (fine-tune, joint, random/weighted/dual replay, EWC, GEM), and is
//! scored with mel-cepstral distortion on every language seen so far.
//!
//! Module map:
//! - [`model`]: toy encoder/trunk/two-head/post-net model with analytic gradients and Adam.
//! - [`data`]: synthetic pseudo-language tasks, the binary dataset format, the merged replay view.
//! - [`buffer`]: the language-balanced episodic memory.
//! - [`samplers`]: random, weighted and dual (balanced + random) batch construction.
//! - [`strategies`]: per-stage training and the full task sequence.
//! - [`metrics`]: MCD, MCDR, learning curves and the stage table.
//! - [`harness`]: configuration, checkpoints and run directories.

pub mod buffer;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod strategies;

pub use error::{Error, Result};
pub use exec::Exec;
