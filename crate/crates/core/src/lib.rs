pub mod cli;
pub mod constraint;
pub mod inference;
pub mod error;
pub mod measures;
pub mod sampling;
pub mod scenarios;
pub mod stats;

pub use error::{Error, Result};
