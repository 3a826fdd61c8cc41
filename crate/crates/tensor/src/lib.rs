//! Minimal dense tensor library with reverse-mode automatic differentiation,
//! covering exactly the operator set a sequential region-based detector with
//! a spatial memory needs: conv2d, fully-connected, the usual activations,
//! align-corners bilinear resampling, RoI read/write, max RoI pooling, and
//! the loss heads.
//!
//! Values are `f64` throughout so finite-difference gradient checks are
//! meaningful. Forward results are bit-identical across runs and thread
//! counts: every parallel kernel computes each output element in one task
//! with a fixed accumulation order.

mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod ops;
mod par;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use ops::{Activation, MapBox};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
