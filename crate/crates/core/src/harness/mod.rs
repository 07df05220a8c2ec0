//! Metrics, experiment orchestration and the command-line interface.

pub mod config;
pub mod dump;
pub mod experiment;
pub mod metrics;
pub mod sweep;

pub use config::{ExperimentConfig, FilterInit, Method};
pub use metrics::{nmse_db, nmse_db_each, trajectory_nmse_db, NMSE_FLOOR_DB};
