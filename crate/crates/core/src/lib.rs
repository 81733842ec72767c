//! Contrastive image-text pretraining with sampled sub-captions and a
//! learnable-token caption decoder, at toy scale.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod plot;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod toy_data;
pub mod training;

pub use error::{ClipsError, Result};
pub use scalar::Scalar;

pub type MatrixF32 = tensor::Matrix<f32>;
pub type MatrixF64 = tensor::Matrix<f64>;
pub type ClipsModelF32 = model::ClipsModel<f32>;
pub type ClipsModelF64 = model::ClipsModel<f64>;
pub type TrainStateF32 = training::TrainState<f32>;
pub type TrainStateF64 = training::TrainState<f64>;
