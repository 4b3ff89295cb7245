//! Surrogate-decoder testbed.

pub mod checkpoint;
pub mod error;
pub mod eval_report;
pub mod model;
pub mod multimodal;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod surgery;
pub mod synth_data;
pub mod trajectory;
pub mod training;

pub use error::{ForgeError, Result};
