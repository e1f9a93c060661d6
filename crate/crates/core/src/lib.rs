pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod memory;
pub mod model;
pub mod error;
pub mod eval;
pub mod nn;
pub mod text;
pub mod trainer;
pub mod triples;

pub use error::{Error, Result};
