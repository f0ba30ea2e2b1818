//! Library surface of the command-line harness, shared by the binary and the
//! acceptance suite.

pub mod config;
pub mod experiments;
pub mod report;
