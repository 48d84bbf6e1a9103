//! File formats, IO and the command-line trainer around `earth_core`.

mod binary;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv_io;
pub mod dtw_cache;
pub mod error;
pub mod metrics;

pub use error::{Error, Result};
