//! Prompt-keyed vision transformer with class keys that can be withdrawn at
//! inference time to forget classes without any gradient step.

pub mod batch;
pub mod checkpoint;
mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod unlearn;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
