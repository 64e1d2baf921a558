//! Multi-interest session-based news recommendation.

pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod eval;
mod error;
pub mod head;
pub mod model;
pub mod pin;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
