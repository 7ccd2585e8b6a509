pub mod cli;
pub mod embedstore;
pub mod error;
pub mod evaluator;
pub mod explain;
pub mod initkit;
pub mod protonet;
pub mod synthlab;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
