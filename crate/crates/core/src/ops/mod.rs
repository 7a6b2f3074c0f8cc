//! The differentiable operation set.
//!
//! Each op is a small struct implementing [`crate::graph::DiffOp`] with a
//! hand-derived backward pass. Every one of them is covered by the
//! finite-difference suite in [`crate::gradsuite`]; the unit tests here
//! pin down forward values on tiny hand-computed instances.

mod elementwise;
mod grid;
mod layout;
mod linalg;
mod sample;
mod silog;

pub use elementwise::{Add, AddScalar, Gelu, MeanAll, Mul, Scale, Sigmoid, SumAll};
pub use grid::{AddChannelBias, BilinearResize, ChannelAffine, Conv2d, UpsampleNearest2x};
pub use layout::{
    ConcatChannels, ConcatCols, ConcatRows, GatherRows, GridToRows, PatchExtract, Reshape,
    RowsToGrid, SliceCols, SliceRows,
};
pub use linalg::{matmul_nt, matmul_tn, AddBiasRow, ColumnAffine, LayerNorm, MatMul, Softmax, Transpose2d};
pub use sample::{BilinearSample, WeightedPointSum};
pub use silog::SilogLoss;
