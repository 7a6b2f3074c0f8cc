//! The convolution branch: a strided stem plus one residual block that
//! takes the [3,H,W] image straight to a [C_g, H/4, W/4] detail map. It
//! runs beside the transformer branch and keeps the high-frequency
//! content the patchified branch throws away.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::LevelShape;
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct ConvBranchConfig {
    /// Output channels C_g.
    pub channels: usize,
}

impl ConvBranchConfig {
    pub fn desk_default() -> Self {
        ConvBranchConfig { channels: 64 }
    }

    fn stem_channels(&self) -> usize {
        self.channels / 2
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<LevelShape> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "conv branch: channels {} must be even and >= 2",
                self.channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "conv branch: image {h}x{w} must be divisible by 4"
            )));
        }
        Ok(LevelShape {
            c: self.channels,
            h: h / 4,
            w: w / 4,
        })
    }
}

pub fn init_params(ps: &mut ParamSet, prefix: &str, cfg: &ConvBranchConfig, rng: &mut impl Rng) {
    let (cs, cg) = (cfg.stem_channels(), cfg.channels);
    nn::init_conv(ps, &format!("{prefix}.stem.conv"), cs, 3, 3, rng);
    nn::init_channel_affine(ps, &format!("{prefix}.stem.aff"), cs);
    nn::init_conv(ps, &format!("{prefix}.res.conv1"), cg, cs, 3, rng);
    nn::init_channel_affine(ps, &format!("{prefix}.res.aff1"), cg);
    nn::init_conv(ps, &format!("{prefix}.res.conv2"), cg, cg, 3, rng);
    nn::init_channel_affine(ps, &format!("{prefix}.res.aff2"), cg);
    nn::init_conv(ps, &format!("{prefix}.res.proj"), cg, cs, 1, rng);
}

/// [3,H,W] → [C_g, H/4, W/4].
pub fn encode_conv(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    image: NodeId,
    cfg: &ConvBranchConfig,
) -> Result<NodeId> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "encode_conv expects a [3,H,W] image, got {shape:?}"
        )));
    }
    cfg.validate(shape[1], shape[2])?;

    // stem: 3x3 stride 2 → H/2
    let mut x = nn::conv(g, bp, &format!("{prefix}.stem.conv"), image, 2, 1)?;
    x = nn::channel_affine(g, bp, &format!("{prefix}.stem.aff"), x)?;
    x = nn::gelu(g, x)?;

    // residual block with strided shortcut → H/4
    let mut f = nn::conv(g, bp, &format!("{prefix}.res.conv1"), x, 2, 1)?;
    f = nn::channel_affine(g, bp, &format!("{prefix}.res.aff1"), f)?;
    f = nn::gelu(g, f)?;
    f = nn::conv(g, bp, &format!("{prefix}.res.conv2"), f, 1, 1)?;
    f = nn::channel_affine(g, bp, &format!("{prefix}.res.aff2"), f)?;

    let shortcut = nn::conv(g, bp, &format!("{prefix}.res.proj"), x, 2, 0)?;
    let sum = g.apply(ops::Add, &[f, shortcut])?;
    nn::gelu(g, sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_is_quarter_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ConvBranchConfig { channels: 8 };
        let mut ps = ParamSet::new();
        init_params(&mut ps, "cb", &cfg, &mut rng);
        let img = Tensor::rand_uniform(&[3, 16, 8], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let iid = g.leaf(img);
        let y = encode_conv(&mut g, &bp, "cb", iid, &cfg).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 4, 2]);
    }

    #[test]
    fn rejects_bad_sizes_and_config() {
        let cfg = ConvBranchConfig { channels: 8 };
        assert!(cfg.validate(18, 16).is_err());
        assert!(ConvBranchConfig { channels: 7 }.validate(16, 16).is_err());
    }

    #[test]
    fn zero_params_give_zero_map() {
        // all-zero convs and affines: GELU(0)=0 throughout
        let cfg = ConvBranchConfig { channels: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "cb", &cfg, &mut rng);
        for (_, t) in ps.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let img = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let iid = g.leaf(img);
        let y = encode_conv(&mut g, &bp, "cb", iid, &cfg).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        let cfg = ConvBranchConfig { channels: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "cb", &cfg, &mut rng);
        let img = Tensor::rand_uniform(&[3, 8, 8], 0.1, 1.0, &mut rng);
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let iid = g.leaf(img);
        let y = encode_conv(&mut g, &bp, "cb", iid, &cfg).unwrap();
        let loss = g.apply(ops::SumAll, &[y]).unwrap();
        let grads = g.backward(loss, Tensor::scalar(1.0)).unwrap();
        for (gt, (name, _)) in bp.gradients(&g, &grads).iter().zip(ps.iter()) {
            let nz = gt.data().iter().any(|&v| v != 0.0);
            assert!(nz, "no gradient reached {name}");
        }
    }
}
