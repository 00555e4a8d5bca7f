//! Self-correction training on a synthetic grid-reasoning task.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod inference;
pub mod io;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
