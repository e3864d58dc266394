//! Desk-scale study harness for asynchronous motor-imagery EEG
//! classification: epoch extraction from continuous trials, a CSP+SVM
//! baseline and a CNN-FC network under five joint-training task
//! configurations, ten-fold cross-validation, and the accompanying
//! statistical battery.

pub mod cli;
pub mod config;
pub mod csp;
pub mod dsp;
pub mod error;
pub mod experiments;
pub mod ingest;
pub mod nnet;
pub mod seed;
pub mod stats;
pub mod svm;

pub use error::{Error, Result};

/// Entry point for the `mibci` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main_impl()
}
