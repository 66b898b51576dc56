//! Encoder-decoder transformer whose output style is steered by swappable
//! bottleneck adapters.

pub mod autograd;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod store;
pub mod styledata;
pub mod tensor;
pub mod training;

pub use autograd::{grad_check, Segment, Tape, Var};
pub use error::{Error, Result};
pub use model::{AdapterSet, Group, Model, ModelConfig, ParamRegistry, Selector};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type AdapterSet64 = AdapterSet<f64>;
