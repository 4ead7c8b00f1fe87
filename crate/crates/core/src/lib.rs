pub mod backbone;
pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Bindings, CapstModel, ModelConfig};
pub use tensor::{Scalar, Tape, Tensor, Var};
