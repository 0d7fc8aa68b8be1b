//! File formats, the command-line driver and the HTTP session service built
//! on `vpu-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pngio;
pub mod report;
pub mod service;

pub use error::{AppError, CheckpointError, Result};
