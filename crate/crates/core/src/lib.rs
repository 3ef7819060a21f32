//! Dynamic sparse graph training on a small CPU tensor engine.
//!
//! Each hidden layer picks which output neurons to compute from a cheap
//! estimate made in a randomly projected low-dimensional space, computes only
//! those, and carries the resulting binary mask through batch normalization
//! and the backward pass.

pub mod checkpoint;
pub mod conv;
pub mod cost;
pub mod counters;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod ops;
pub mod projection;
pub mod select;
pub mod tensor;
pub mod train;
pub mod zoo;
pub mod zvc;

pub use counters::{CounterSnapshot, OpCounters};
pub use error::{DsgError, Result};
pub use model::{ForwardOptions, ForwardPass, Layer, Model};
pub use select::{SelectionMask, SelectionMode};
pub use tensor::Tensor;
pub use zoo::{build_model, ModelName, ModelSpec};
