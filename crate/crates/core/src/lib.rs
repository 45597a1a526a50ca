//! Differentiable cell-based architecture search for spatio-temporal
//! (video) convolutional networks, at desk scale.

pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod net;
pub mod ops;
pub mod space;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
