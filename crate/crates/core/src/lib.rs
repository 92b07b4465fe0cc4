pub mod attention;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod params;
pub mod prototype;
pub mod refine;
pub mod tensor;

pub use error::{Error, Result};
