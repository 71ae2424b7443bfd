pub mod chunking;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod training;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
pub use numerics::Tensor;
