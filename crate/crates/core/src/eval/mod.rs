//! Metrics and the experiment drivers built on them.

pub mod experiments;
pub mod metrics;
pub mod pipeline;

pub use experiments::*;
pub use metrics::*;
pub use pipeline::*;
