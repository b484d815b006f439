//! Loss change allocation: per-parameter, per-iteration credit for the change
//! in training loss, computed by path integration along a recorded optimizer
//! trajectory.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod trajectory;

pub use error::{Error, Result};
