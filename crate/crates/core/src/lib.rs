pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
