//! Grounded knowledge-enhanced vision-language pre-training for chest
//! radiographs, sized for a single CPU.

pub mod autograd;
pub mod backbone;
pub mod data_model;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod gk_fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
