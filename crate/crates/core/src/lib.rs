pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pgtc;
pub mod selftest;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
