//! Small reverse-mode autodiff engine and the layers built on it.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod param;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC};
pub use graph::{sigmoid, weighted_bce, Graph, Var, BCE_EPS};
pub use layers::{
    positional_encoding, Encoder, EncoderBlock, EncoderShape, FeedForward, GruCell, LayerNorm,
    Linear, LowRank, MultiHeadAttention, LN_EPS,
};
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("d_model {d_model} does not split into {n_heads} heads")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint parameter {0} has no counterpart in the model")]
    UnknownParam(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: [usize; 2], got: [usize; 2] },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
