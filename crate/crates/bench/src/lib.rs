//! Noise injection, synthetic image pairs, training loops, the robustness
//! benchmark and the self-test behind the `nrmatch` command.

pub mod bench;
pub mod config;
mod error;
pub mod noise;
pub mod pgm;
pub mod selftest;
pub mod synth;
pub mod train;

pub use error::{BenchError, Result};
