pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod sog;
pub mod tensor;
pub mod training;

pub use error::{Result, SogError};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use model::{Grounder, ModelConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Grounder32 = Grounder<f32>;
pub type Grounder64 = Grounder<f64>;
