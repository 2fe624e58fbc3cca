//! Configuration, checkpoints, metrics files and reports.

pub mod checkpoint;
pub mod config;
pub mod lock;
pub mod metrics;
pub mod report;
