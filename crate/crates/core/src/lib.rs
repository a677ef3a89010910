pub mod adaptive;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vsl;

pub use error::{Error, Result};
