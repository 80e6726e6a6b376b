//! Primitive differentiable operations. Each module provides a plain-tensor
//! forward where useful and the corresponding recorded `Graph` method.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod shape;
