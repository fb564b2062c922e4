//! Minimal dense-tensor numeric core with reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`. The op set is exactly what the classifiers need:
//! 3x3 convolution, 2x2 average pooling, fully-connected, LSTM cell,
//! sigmoid/tanh/relu, dropout, binary cross-entropy, and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, xavier_uniform, ParamSet, Parameter, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Tape, Var, BCE_EPS};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("avgpool2d: extents must be even, got {height}x{width}")]
    OddExtent { height: usize, width: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
