pub mod autodiff;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod models;
pub mod phantom;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
