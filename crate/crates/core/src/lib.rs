pub mod error;
pub mod evaluator;
pub mod graph;
pub mod importance;
pub mod linalg;
pub mod model;
pub mod pruner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
