//! Block-indexed LoRA adapter tooling for the SDXL attention topology.

pub mod adapter;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod rng;
pub mod tensor;
pub mod topology;
pub mod toy;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{DType, Tensor};
