pub mod channel;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod learning;
pub mod numerics;
pub mod turbo;

pub use error::{Error, Result};
