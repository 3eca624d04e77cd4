pub mod adapters;
pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod proximal;
pub mod theory;

pub use error::{Error, Result};
