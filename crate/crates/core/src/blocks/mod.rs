//! Network building blocks on top of the autodiff graph.

pub mod aggregate;
pub mod config;
pub mod excitation;
pub mod model;
pub mod params;
pub mod rda;

pub use config::ModelConfig;
pub use model::{GaitModel, ModelOutput};
pub use params::{Bound, Init, Param, ParamStore};
