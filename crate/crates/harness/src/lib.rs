//! Experiment harness for test-time batch-norm adaptation: configuration,
//! data setup, source training, experiment runners and artifact output.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod report;
pub mod train;
