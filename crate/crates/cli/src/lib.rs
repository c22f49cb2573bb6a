//! Orchestration of the offline and online pipeline: the built-in reference
//! scenario, solve and comparison commands, and error metrics.

pub mod commands;
pub mod metrics;
pub mod scenario;
