pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use autograd::{Conv2dParams, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
pub mod nn;
pub mod backbone;
pub mod vivit;
pub mod metrics;
pub mod model;
pub mod data;
pub mod training;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
