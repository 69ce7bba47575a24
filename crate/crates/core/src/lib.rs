pub mod attacks;
pub mod corpus;
pub mod error;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
