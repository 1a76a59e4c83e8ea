//! A small CPU engine for volumetric (3D) convolutional networks.
//!
//! Layers are explicit structs with hand-written `forward`/`backward` passes
//! that cache what they need between the two calls. There is no tape and no
//! dynamic graph: a network composes layers and runs the backward pass in
//! reverse order itself. All kernels are single threaded with a fixed
//! reduction order, so training is bit-reproducible for a fixed seed.
//!
//! Tensors are laid out `(N, C, T, H, W)` for volumes and `(N, F)` for
//! feature vectors.

mod activation;
mod conv;
mod dropout;
mod linear;
mod norm;
mod optim;
mod param;
mod pool;
pub mod scalar;
mod tensor;

pub use activation::Relu;
pub use conv::{Conv3d, ConvGeometry};
pub use dropout::{Dropout, Dropout3d};
pub use linear::Linear;
pub use norm::BatchNorm3d;
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, GradScaler};
pub use param::{join_name, Module, Param};
pub use pool::GlobalAvgPool;
pub use scalar::Scalar;
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called before forward on {0}")]
    NoForward(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Arithmetic used for convolution and affine operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// Operands rounded to IEEE half precision, accumulation in the tensor
    /// element type (the usual automatic mixed precision contract).
    Half,
}

/// Per-pass state threaded through every layer.
pub struct Ctx {
    /// Training mode: batch statistics in normalization, active dropout.
    pub training: bool,
    /// Cache activations so that `backward` can be called afterwards.
    pub keep_graph: bool,
    pub precision: Precision,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            keep_graph: true,
            precision: Precision::Full,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference without gradient bookkeeping.
    pub fn eval() -> Self {
        Self {
            training: false,
            keep_graph: false,
            precision: Precision::Full,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inference that still allows a backward pass (saliency methods).
    pub fn eval_with_grad() -> Self {
        Self {
            keep_graph: true,
            ..Self::eval()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}
