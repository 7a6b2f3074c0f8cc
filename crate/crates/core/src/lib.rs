//! depthformer-core: a CPU, f64, from-scratch implementation of a
//! dual-branch monocular depth estimator.
//!
//! Layering, bottom up:
//! - [`tensor`], [`graph`], [`ops`], [`gradcheck`]: dense tensors, the
//!   reverse-mode tape, every differentiable operation, and the
//!   finite-difference oracle they are all verified against.
//! - [`swin`], [`conv_branch`], [`deform`], [`hahi`], [`decoder`]: the
//!   model itself — shifted-window transformer branch, convolution stem,
//!   deformable attention, the fusion neck, and the UpConv decoder with
//!   its depth head and SILog loss.
//! - [`depthmap`], [`metrics`]: evaluation protocol (crops, ranges,
//!   threshold accuracies, binned reports).
//! - [`scene`], [`train`], [`checkpoint`], [`depth_io`], [`unproject`],
//!   [`report`], [`gradsuite`], [`ablation`]: the harness around the math.

pub mod ablation;
pub mod checkpoint;
pub mod conv_branch;
pub mod decoder;
pub mod deform;
pub mod depth_io;
pub mod depthmap;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod hahi;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod report;
pub mod scene;
pub mod swin;
pub mod train;
pub mod unproject;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{DiffOp, Gradients, Graph, NodeId};
pub use tensor::Tensor;
