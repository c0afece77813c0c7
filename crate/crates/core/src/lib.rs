//! Desk-scale fine-tuning lab.
//!
//! Trains a small decoder-only transformer on synthetic reasoning tasks with
//! standard cross-entropy (SFT), probability-weighted cross-entropy (DFT) and
//! contrast objectives, and checks the gradient-level relations between them
//! by exact enumeration.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evalreport;
pub mod losses;
pub mod model;
pub mod rft;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{LabError, Result};
pub use tensor::Tensor;
