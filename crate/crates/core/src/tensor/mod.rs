//! Dense arrays, reverse-mode gradients and the seeded random stream.

mod array;
pub mod gradcheck;
mod rng;
mod tape;

pub use array::Array;
pub use gradcheck::{check_gradients, GradCheck};
pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable #{0} is not connected to the loss")]
    Detached(usize),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
}
