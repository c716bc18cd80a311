//! Two-stage open-vocabulary segmentation with mask-adapted image encoding.
pub mod classify;
pub mod dataset;
pub mod encoder;
pub mod error;
mod exec;
pub mod mining;
pub mod numerics;
pub mod pipeline;
pub mod preprocess;
pub mod tuning;

pub use error::{Error, Result};
pub use exec::map_indexed;
