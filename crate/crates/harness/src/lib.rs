//! Experiment harness: data sources, configuration, checkpoints, sweeps and
//! reports around `cvpb-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod records;
pub mod report;
pub mod runner;
pub mod studies;
