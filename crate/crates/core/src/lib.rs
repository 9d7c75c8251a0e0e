pub mod config;
pub mod container;
pub mod decoder;
pub mod error;
pub mod pipeline;
pub mod scene;
pub mod synthworld;
pub mod training;

pub use error::{Error, FormatError, Result};
