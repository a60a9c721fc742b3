//! File formats, report builders and the `dml` command line on top of `dml-core`.

pub mod bench;
pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{Result, ToolError};
