pub mod augmentation;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod reporting;
pub mod trainer;

pub use error::{Error, Result};
