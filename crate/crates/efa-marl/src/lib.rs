//! Experiment driver for the EFA-DQN workbench: configuration files,
//! training runs with metrics and checkpoints, greedy evaluation, ablations,
//! plot-data export and the self-test suite. The numerical core lives in
//! [`efa_marl_core`].

pub mod checkpoint;
pub mod config;
mod error;
pub mod game_file;
pub mod metrics;
pub mod plot;
pub mod selftest;
pub mod trainer;

pub use efa_marl_core as core;
pub use error::{Error, Result};
