pub mod backbone;
pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rfc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
