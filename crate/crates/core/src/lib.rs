//! Multi-target speech-to-unit translation on a synthetic speech world.
//!
//! The pipeline mirrors a unit-based speech translation system end to end:
//! several simulated TTS systems render the same target text, a shared
//! K-means codebook turns the renderings into discrete units, a toy ASR
//! scores every rendering, and a shared-encoder model with one decoder
//! branch per system is trained on the units with a leading quality token.

pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
#[doc(hidden)]
pub mod seed;
pub mod synthworld;
pub mod targetprep;
pub mod unitizer;
pub mod vocab;

pub use error::{Error, Result};
