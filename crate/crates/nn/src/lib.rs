//! A small CPU tensor engine: `N × C × H × W` tensors, convolution via
//! im2col + GEMM, and layers with explicit, hand-written backward passes.
//!
//! Layers cache what they need during `forward` and consume the cache in
//! `backward`, accumulating parameter gradients into [`Param::grad`].
//! Everything is generic over [`Scalar`] so the same network can run in
//! `f32` for training and `f64` for finite-difference verification.

pub mod functional;
pub mod init;
pub mod layers;
mod param;
mod scalar;
mod tensor;

pub use param::{join, Buffer, Module, Param, ParamKind};
pub use scalar::{read_le, DType, Scalar};
pub use tensor::Tensor;

/// Whether normalization uses batch statistics and dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
