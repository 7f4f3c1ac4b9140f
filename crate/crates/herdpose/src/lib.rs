//! File formats, reports, overlays and the `herdpose` command line, built on
//! `herdpose-core`.

pub mod canon;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsio;
pub mod ingest;
pub mod overlay;
pub mod pool;
pub mod report;

pub use error::{Error, Result};
