//! Looped-transformer multi-view reconstruction on a from-scratch autodiff
//! engine, generic over `f32` and `f64`.

pub mod binio;
pub mod diagnostics;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use model::{BlockVariant, DepthHead, Model, ModelConfig, ModelError, Prediction};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use train::{Checkpoint, Config, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
