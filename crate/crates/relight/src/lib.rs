//! Referral-based portrait relighting.
//!
//! The pipeline encodes a source subject and a target illumination into
//! latent features, expands the illumination into a three-way set of anchor
//! lighting codes (0 and +/-90 degree environment rotations), and renders the
//! relit subject with a multiplicative neural render that modulates subject
//! features channel-wise with per-layer lighting sub-codes. A procedural
//! synthetic dataset generator, training loop, rotation-sweep inference and
//! evaluation tooling make the crate self-contained.

pub mod backbone;
pub mod cli;
pub mod codec;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod renderer;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};

/// Entry point used by the `relight` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::run()
}
