//! Transformer networks for pedestrian trajectory forecasting.
//!
//! Observed positions become per-step speed tokens; an encoder-decoder
//! transformer (or a masked encoder) predicts future speeds, which are
//! integrated back to world positions. See `examples/` for each capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
