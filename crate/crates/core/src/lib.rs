pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
