//! Spherical losses, the Z-loss, and an output layer whose exact SGD step
//! costs O(d^2) regardless of the number of classes, plus the n-gram
//! language model, trainer and benchmark built around them.

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod factored;
pub mod heads;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, ErrorClass, Result};
