//! Doubly-robust estimation of multivalued treatment effects after
//! group-lasso covariate selection.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod effects;
pub mod error;
pub mod penalty;
pub mod pipeline;
pub mod refit;
pub mod report;
pub mod simulate;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
