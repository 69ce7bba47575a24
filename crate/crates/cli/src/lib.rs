//! Command-line driver: configuration, run-directory artifacts, and report
//! aggregation.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
