//! Vectorized map-element detection head built around anchor-neighborhood
//! query units and grouped local self-attention, trained end-to-end on
//! synthetic bird's-eye-view scenes.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matching;
pub mod glsa;
pub mod gradcheck;
pub mod model;
pub mod profiler;
pub mod nn;
pub mod query;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// The seedable generator threaded through every stochastic operation.
pub type EanRng = rand_chacha::ChaCha8Rng;
