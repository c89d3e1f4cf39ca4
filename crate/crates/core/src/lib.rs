//! Low-rank adapters trained against text-derived domain shifts, and a toy
//! two-stage depth pipeline around them.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{SeededRng, Tensor};
