//! Core of the EFA-DQN multi-agent workbench.
//!
//! Everything here is `no_std` + `alloc`: dense tensors with reverse-mode
//! gradients, the particle-world simulators, the first-mover election network
//! and the value-decomposition learner. File formats, the command line and the
//! experiment driver live in the `efa-marl` crate.

#![no_std]

extern crate alloc;

pub mod efa;
pub mod envs;
mod error;
pub mod game;
pub mod numerics;
pub mod qlearn;
pub mod rng;
pub mod session;

pub use error::{Error, Result};
pub use rng::SeededRng;
