//! UpConv decoder and depth head.
//!
//! Starting from the coarsest pyramid level, each step upsamples 2×
//! (nearest) and convolves down to the next level's width, fuses with
//! that level by concat + 3×3 conv, and so on to the finest level, where
//! the conv-branch map joins the same way when present. A final upsample
//! halves the channels, a 3×3 head maps to one logit channel, and the
//! depth head squashes logits into (d_min, d_max) with a sigmoid before
//! a parameter-free bilinear resize to the target resolution.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn desk_default() -> Self {
        DepthRange { d_min: 0.1, d_max: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite() && 0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(Error::invalid(format!(
                "depth range ({}, {}) must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// `level_channels` is finest-first; `g_channels` is the conv-branch
/// width fused at the finest level.
pub fn init_params(
    ps: &mut ParamSet,
    prefix: &str,
    level_channels: &[usize],
    g_channels: Option<usize>,
    rng: &mut impl Rng,
) {
    let n = level_channels.len();
    assert!(n > 0, "decoder needs at least one level");
    let c0 = level_channels[0];
    assert!(c0 >= 2 && c0 % 2 == 0, "finest width must be even");
    for i in 0..n - 1 {
        let (ci, coarser) = (level_channels[i], level_channels[i + 1]);
        nn::init_conv(ps, &format!("{prefix}.up{i}"), ci, coarser, 3, rng);
        nn::init_conv(ps, &format!("{prefix}.fuse{i}"), ci, 2 * ci, 3, rng);
    }
    if let Some(cg) = g_channels {
        nn::init_conv(ps, &format!("{prefix}.gfuse"), c0, c0 + cg, 3, rng);
    }
    nn::init_conv(ps, &format!("{prefix}.up_final"), c0 / 2, c0, 3, rng);
    nn::init_conv(ps, &format!("{prefix}.head"), 1, c0 / 2, 3, rng);
}

/// Decode a finest-first pyramid (and optional conv-branch map at the
/// finest resolution) into depth logits [1, 2·H₀, 2·W₀].
pub fn decode(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    levels: &[NodeId],
    gmap: Option<NodeId>,
) -> Result<NodeId> {
    let n = levels.len();
    if n == 0 {
        return Err(Error::invalid("decode: empty pyramid"));
    }
    let mut x = levels[n - 1];
    for i in (0..n - 1).rev() {
        let up = g.apply(ops::UpsampleNearest2x, &[x])?;
        x = nn::conv(g, bp, &format!("{prefix}.up{i}"), up, 1, 1)?;
        x = nn::gelu(g, x)?;
        let want = g.value(levels[i]).shape().to_vec();
        if g.value(x).shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "decode fuse",
                lhs: g.value(x).shape().to_vec(),
                rhs: want,
            });
        }
        let cat = g.apply(ops::ConcatChannels, &[x, levels[i]])?;
        x = nn::conv(g, bp, &format!("{prefix}.fuse{i}"), cat, 1, 1)?;
        x = nn::gelu(g, x)?;
    }
    if let Some(gm) = gmap {
        let cat = g.apply(ops::ConcatChannels, &[x, gm])?;
        x = nn::conv(g, bp, &format!("{prefix}.gfuse"), cat, 1, 1)?;
        x = nn::gelu(g, x)?;
    }
    let up = g.apply(ops::UpsampleNearest2x, &[x])?;
    x = nn::conv(g, bp, &format!("{prefix}.up_final"), up, 1, 1)?;
    x = nn::gelu(g, x)?;
    nn::conv(g, bp, &format!("{prefix}.head"), x, 1, 1)
}

/// logits [1,h,w] → bounded depth, bilinearly resized to [1,out_h,out_w]:
/// d = d_min + (d_max − d_min)·σ(logit).
pub fn depth_head(
    g: &mut Graph,
    logits: NodeId,
    range: DepthRange,
    out_h: usize,
    out_w: usize,
) -> Result<NodeId> {
    range.validate()?;
    let s = g.apply(ops::Sigmoid, &[logits])?;
    let s = g.apply(ops::Scale(range.d_max - range.d_min), &[s])?;
    let d = g.apply(ops::AddScalar(range.d_min), &[s])?;
    g.apply(ops::BilinearResize { out_h, out_w }, &[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decode_shapes_with_and_without_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let channels = [8usize, 16];
        for gch in [None, Some(6)] {
            let mut ps = ParamSet::new();
            init_params(&mut ps, "dec", &channels, gch, &mut rng);
            let mut g = Graph::new();
            let bp = BoundParams::bind(&mut g, &ps);
            let levels = vec![
                g.leaf(Tensor::rand_normal(&[8, 8, 8], 1.0, &mut rng)),
                g.leaf(Tensor::rand_normal(&[16, 4, 4], 1.0, &mut rng)),
            ];
            let gmap = gch.map(|c| g.leaf(Tensor::rand_normal(&[c, 8, 8], 1.0, &mut rng)));
            let logits = decode(&mut g, &bp, "dec", &levels, gmap).unwrap();
            assert_eq!(g.value(logits).shape(), &[1, 16, 16]);
        }
    }

    #[test]
    fn depth_head_formula_and_bounds() {
        let range = DepthRange { d_min: 0.001, d_max: 10.0 };
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let d = depth_head(&mut g, logits, range, 4, 4).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 4, 4]);
        let want = 0.001 + 9.999 / (1.0 + (-1.0f64).exp());
        for &v in g.value(d).data() {
            assert!((v - want).abs() < 1e-12);
        }

        // saturation stays strictly inside the range
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 1, 2], vec![-50.0, 50.0]).unwrap());
        let d = depth_head(&mut g, logits, range, 1, 2).unwrap();
        let vals = g.value(d).data();
        assert!(vals[0] >= range.d_min && vals[0] < 0.002);
        assert!(vals[1] <= range.d_max && vals[1] > 9.99);

        assert!(DepthRange { d_min: -1.0, d_max: 2.0 }.validate().is_err());
        assert!(DepthRange { d_min: 3.0, d_max: 2.0 }.validate().is_err());
    }

    #[test]
    fn gradients_flow_through_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let channels = [4usize, 8];
        let mut ps = ParamSet::new();
        init_params(&mut ps, "dec", &channels, Some(6), &mut rng);
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let levels = vec![
            g.leaf(Tensor::rand_normal(&[4, 4, 4], 1.0, &mut rng)),
            g.leaf(Tensor::rand_normal(&[8, 2, 2], 1.0, &mut rng)),
        ];
        let gmap = g.leaf(Tensor::rand_normal(&[6, 4, 4], 1.0, &mut rng));
        let logits = decode(&mut g, &bp, "dec", &levels, Some(gmap)).unwrap();
        let depth = depth_head(&mut g, logits, DepthRange::desk_default(), 16, 16).unwrap();
        let loss = g.apply(ops::SumAll, &[depth]).unwrap();
        let grads = g.backward(loss, Tensor::scalar(1.0)).unwrap();
        for (gt, (name, _)) in bp.gradients(&g, &grads).iter().zip(ps.iter()) {
            assert!(
                gt.data().iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
        // and into the pyramid inputs themselves
        for &l in &levels {
            assert!(grads.wrt(l, &g).data().iter().any(|&v| v != 0.0));
        }
    }
}
