pub mod augment;
pub mod buffers;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod separation;
pub mod ssl;

pub use error::{Error, Result};
