//! Configuration, data, checkpoints, orchestration and reporting around
//! `ptqlora-core`.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
