mod binio;
pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use tensor::{Scalar, Tensor};
