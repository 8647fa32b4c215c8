//! Dense NCHW `f32` tensors with a small reverse-mode autodiff tape, the
//! convolution/resampling kernels needed by fully convolutional image
//! networks, and an Adam optimizer.

mod adam;
mod check;
mod error;
mod graph;
mod kernels;
mod tensor;

pub use adam::{Adam, Parameter};
pub use check::{gradient_check, GradCheck};
pub use error::{Result, TensorError};
pub use graph::{
    avg_pool2_tensor, resize_tensor, BinaryOp, Graph, UnaryOp, Var, DIV_EPS, SIGMOID_EPS,
};
pub use tensor::{numel, Shape, Tensor};
