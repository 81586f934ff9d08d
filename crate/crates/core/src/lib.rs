//! Orthogonalization-free block eigensolver for discretized Schrödinger operators.

pub mod analysis;
pub mod blockvec;
pub mod cli;
pub mod config;
pub mod discretize;
pub mod error;
pub mod greens;
pub mod scheme;
pub mod sparse;
pub mod state_io;
pub mod verify;

pub use error::{Error, Result};
