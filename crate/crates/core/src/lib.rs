//! Sequence-to-sequence training and inference engine.

pub mod checkpoint;
pub mod criterions;
pub mod data;
pub mod error;
pub mod generation;
pub mod lr_scheduler;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod registry;
pub mod session;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
