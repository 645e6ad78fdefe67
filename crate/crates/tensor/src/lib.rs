//! Dense tensors and tape-based reverse-mode automatic differentiation.

mod error;
mod float;
mod grad;
pub mod gradcheck;
pub mod kernels;
pub mod suite;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, DType, Float, MatRef};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
