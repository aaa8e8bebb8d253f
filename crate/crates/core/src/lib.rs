pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod qformer;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
