pub mod ctmc;
pub mod error;
pub mod graphs;
pub mod gwishart;
pub mod linalg;
pub mod mixture;
pub mod model;
pub mod posterior;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
pub use nalgebra;
