pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
