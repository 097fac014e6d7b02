//! Experiment orchestration: pose training, fusion and translation runs,
//! evaluation, configuration and run manifests.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod pose;
