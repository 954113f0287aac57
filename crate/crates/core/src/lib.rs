//! Prompt-based continual video instance segmentation on synthetic data.

pub mod cli;
pub mod detector;
pub mod error;
pub mod gtssm;
pub mod harness;
pub mod ogc;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod video;

pub use error::{HvplError, Result};
