//! Gait recognition with region-aware dynamic temporal aggregation and
//! motion excitation, built on a small reverse-mode autodiff engine.

pub mod blocks;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
