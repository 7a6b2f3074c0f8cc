//! Shared building blocks: parameter initializers and the matching
//! graph-side layer builders. Every layer is a (init_*, build) pair that
//! agrees on parameter names under a caller-chosen prefix.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;
use rand::Rng;

/// Dense layer x·W + b: weights [in, out] with the given init std.
pub fn init_linear(
    ps: &mut ParamSet,
    prefix: &str,
    input: usize,
    output: usize,
    std: f64,
    rng: &mut impl Rng,
) {
    let w = if std == 0.0 {
        Tensor::zeros(&[input, output])
    } else {
        Tensor::rand_normal(&[input, output], std, rng)
    };
    ps.add(format!("{prefix}.w"), w);
    ps.add(format!("{prefix}.b"), Tensor::zeros(&[output]));
}

pub fn linear(g: &mut Graph, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = g.apply(ops::MatMul, &[x, bp.id(&format!("{prefix}.w"))])?;
    g.apply(ops::AddBiasRow, &[y, bp.id(&format!("{prefix}.b"))])
}

/// LayerNorm over the last axis, gamma init 1, beta init 0.
pub fn init_layer_norm(ps: &mut ParamSet, prefix: &str, c: usize) {
    ps.add(format!("{prefix}.g"), Tensor::full(&[c], 1.0));
    ps.add(format!("{prefix}.b"), Tensor::zeros(&[c]));
}

pub fn layer_norm(g: &mut Graph, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    g.apply(
        ops::LayerNorm::default_eps(),
        &[
            x,
            bp.id(&format!("{prefix}.g")),
            bp.id(&format!("{prefix}.b")),
        ],
    )
}

/// Convolution with bias; He-style kernel init.
pub fn init_conv(
    ps: &mut ParamSet,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    ps.add(
        format!("{prefix}.w"),
        Tensor::rand_normal(&[cout, cin, k, k], std, rng),
    );
    ps.add(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn conv(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let y = g.apply(ops::Conv2d { stride, pad }, &[x, bp.id(&format!("{prefix}.w"))])?;
    g.apply(ops::AddChannelBias, &[y, bp.id(&format!("{prefix}.b"))])
}

/// Per-channel affine on grids, gamma init 1, beta init 0.
pub fn init_channel_affine(ps: &mut ParamSet, prefix: &str, c: usize) {
    ps.add(format!("{prefix}.g"), Tensor::full(&[c], 1.0));
    ps.add(format!("{prefix}.b"), Tensor::zeros(&[c]));
}

pub fn channel_affine(g: &mut Graph, bp: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    g.apply(
        ops::ChannelAffine,
        &[
            x,
            bp.id(&format!("{prefix}.g")),
            bp.id(&format!("{prefix}.b")),
        ],
    )
}

pub fn gelu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.apply(ops::Gelu, &[x])
}
