//! Anatomy-aware dense motion estimation and myocardium tracking.

pub mod cine;
pub mod config;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod shape_prior;
pub mod synth;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use mask::MaskImage;
pub use tensor::Tensor;
