//! Post-classification refinement: detection boxes and landmark cascades.

pub mod bbox;
pub mod cascade;
pub mod ridge;

pub use bbox::*;
pub use cascade::*;
pub use ridge::*;
