//! Batch runner for the issue-resolution pipeline: configuration, dataset
//! loading, a durable run store and the stage commands behind `monkeys`.

pub mod backends;
pub mod config;
pub mod dataset;
pub mod runner;
pub mod store;

pub use config::RunConfig;
pub use runner::{AnalysisReport, CommandReport, InstanceMetrics, Runner};
pub use store::RunStore;
