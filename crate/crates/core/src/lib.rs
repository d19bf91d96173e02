//! Vision transformer with adaptive sparse token pruning.
//!
//! Tokens are scored from the class-token attention row weighted by a
//! per-token head importance, compared against one learnable threshold per
//! pruning stage, and physically discarded at inference. Thresholds are
//! trained with a straight-through estimator under a FLOPs budget.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for the model, `f64`
//! for gradient checking). The aliases below fix the common choices.

mod error;

pub mod data;
pub mod flops;
pub mod gradcheck;
pub mod scalar;
pub mod scoring;
pub mod sparsity;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ViTWeights32 = vit::ViTWeights<f32>;
pub type ViTWeights64 = vit::ViTWeights<f64>;
