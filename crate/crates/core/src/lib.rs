pub mod budget;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
