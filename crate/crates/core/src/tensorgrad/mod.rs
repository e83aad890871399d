//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod kernels;
mod tape;
mod tensor;

pub use tape::{ElementwiseOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot broadcast {a:?} with {b:?}")]
    Broadcast { a: Vec<usize>, b: Vec<usize> },
    #[error("matmul inner dimensions differ: {a:?} x {b:?}")]
    InnerDim { a: Vec<usize>, b: Vec<usize> },
    #[error("{op} needs rank >= {expected}, got {got}")]
    Rank { op: &'static str, expected: usize, got: usize },
    #[error("cannot reshape {from:?} to {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("reduction over empty axis {0}")]
    EmptyAxis(usize),
    #[error("slice [{start}, {start}+{len}) exceeds axis {axis} of size {size}")]
    Slice { axis: usize, start: usize, len: usize, size: usize },
    #[error("invalid permutation {0:?}")]
    Permutation(Vec<usize>),
    #[error("{op}: {what}")]
    Domain { op: &'static str, what: &'static str },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("binary elementwise op without second operand")]
    MissingOperand,
}
