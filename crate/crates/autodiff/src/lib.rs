//! Dense `f64` tensors with tape-based reverse-mode differentiation, plus the
//! Adam optimizer and a per-epoch cosine learning-rate schedule.
//!
//! Primitives: matmul, stride-1 2-D convolution, bias add, elementwise add
//! and scale, relu, reshape/flatten, average pooling, softmax cross-entropy,
//! KL divergence between softmax outputs, and the L2 norm. Gradients are
//! available for parameters and for inputs, so the same tape drives both
//! training steps and gradient-based attacks.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig, CosineSchedule, ParamStore};
pub use tape::{GradEntry, Gradients, Leaf, Reduction, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("primitive #{index} ({primitive}): {detail}")]
    Shape {
        index: usize,
        primitive: &'static str,
        detail: String,
    },
    #[error("tape expects {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("loss must have exactly one element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("tape is empty")]
    EmptyTape,
    #[error("no gradient supplied for parameter `{param}`")]
    MissingGradient { param: String },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("optimizer state does not match the parameter layout")]
    OptimizerState,
    #[error("schedule: {0}")]
    Schedule(String),
}
