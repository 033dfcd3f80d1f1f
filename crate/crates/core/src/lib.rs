pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
