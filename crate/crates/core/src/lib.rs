pub mod bbox;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod objective;
pub mod optim;
pub mod render;
pub mod scene;
pub mod similarity;
pub mod surrogates;
pub mod tensor;
pub mod trainer;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use tensor::Tensor;
