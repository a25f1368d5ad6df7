//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation,
//! the convolutional layers used by the expression-transfer networks, spectral
//! normalization and the Adam optimizer.

mod error;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
mod params;
pub mod spectral;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use nn::{Conv2d, Graph, Linear, ResidualBlock, UpResidualBlock};
pub use optim::{Adam, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use spectral::{spectral_normalize, SpectralNormState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
