pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod features;
pub mod config;
pub mod world;
pub mod model;
pub mod metrics;
pub mod checkpoint;
pub mod trainer;
pub mod serving;
pub mod pipeline;
