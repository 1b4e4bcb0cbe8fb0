//! Feature selection by successive projections onto confidence sets.

pub mod bounds;
pub mod cli;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod moments;
pub mod selector;
pub mod stats;

pub use error::{Error, Result};
