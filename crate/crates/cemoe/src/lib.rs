//! File formats, benchmarks and the command line for `cemoe-core`.
//!
//! * [`config`]: versioned JSON configuration files.
//! * [`checkpoint`]: the binary model checkpoint format.
//! * [`report`]: atomic report writes, run directories and manifests.
//! * [`bench`]: the latency harness.
//! * [`cli`]: the `cemoe` command.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
