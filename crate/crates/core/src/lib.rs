pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod policy;
pub mod pose_transformer;
pub mod training;

pub use error::{Error, Result};
