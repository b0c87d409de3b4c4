//! Landmark alignment as extreme-scale pose classification.

pub mod classifier;
pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod model;
pub mod refine;
pub mod session;
pub mod shape;
pub mod temporal;

pub use error::{Error, Result};
