//! The assembled network: transformer branch, optional convolution
//! branch, optional fusion neck, decoder, depth head, and the training
//! loss. The two `use_*` switches produce the four ablation variants.

use crate::conv_branch::{self, ConvBranchConfig};
use crate::decoder::{self, DepthRange};
use crate::deform::DeformAttnConfig;
use crate::depthmap::DepthMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hahi::{self, HahiConfig};
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::swin::{self, BranchConfig};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SILOG_LAMBDA: f64 = 0.85;
pub const SILOG_ALPHA: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub swin: BranchConfig,
    pub conv: ConvBranchConfig,
    pub attn: DeformAttnConfig,
    pub range: DepthRange,
    pub use_conv_branch: bool,
    pub use_hahi: bool,
    pub silog_lambda: f64,
    pub silog_alpha: f64,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            swin: BranchConfig::desk_default(),
            conv: ConvBranchConfig::desk_default(),
            attn: DeformAttnConfig::desk_default(),
            range: DepthRange::desk_default(),
            use_conv_branch: true,
            use_hahi: true,
            silog_lambda: SILOG_LAMBDA,
            silog_alpha: SILOG_ALPHA,
        }
    }

    /// Desk config with the two switches set; the four combinations are
    /// the ablation variants.
    pub fn variant(use_conv_branch: bool, use_hahi: bool) -> Self {
        ModelConfig {
            use_conv_branch,
            use_hahi,
            ..Self::desk_default()
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.use_conv_branch, self.use_hahi) {
            (false, false) => "baseline",
            (true, false) => "+CB",
            (false, true) => "+HAHI",
            (true, true) => "+CB+HAHI",
        }
    }

    /// Channel widths of the emitted pyramid levels, finest first.
    pub fn level_channels(&self) -> Vec<usize> {
        let s = self.swin.num_stages();
        (s - self.swin.num_levels..s)
            .map(|stage| self.swin.stage_channels(stage))
            .collect()
    }

    pub fn hahi_config(&self) -> HahiConfig {
        HahiConfig::for_channels(&self.level_channels(), self.attn)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let levels = self.swin.validate(h, w)?;
        if self.use_conv_branch {
            let g = self.conv.validate(h, w)?;
            // G is fused at the finest pyramid level; resolutions must match
            let finest = levels[0];
            if g.h != finest.h || g.w != finest.w {
                return Err(Error::invalid(format!(
                    "conv branch map {}x{} does not match finest level {}x{}",
                    g.h, g.w, finest.h, finest.w
                )));
            }
        }
        self.range.validate()?;
        if !(0.0..=1.0).contains(&self.silog_lambda) || self.silog_alpha <= 0.0 {
            return Err(Error::invalid(
                "silog loss needs lambda in [0,1] and positive alpha",
            ));
        }
        Ok(())
    }

    /// Fresh parameters for this variant, deterministic in the seed.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        swin::init_params(&mut ps, "swin", &self.swin, &mut rng);
        if self.use_conv_branch {
            conv_branch::init_params(&mut ps, "conv", &self.conv, &mut rng);
        }
        let g_channels = self.use_conv_branch.then_some(self.conv.channels);
        if self.use_hahi {
            hahi::init_params(
                &mut ps,
                "hahi",
                &self.level_channels(),
                g_channels,
                &self.hahi_config(),
                &mut rng,
            );
        }
        decoder::init_params(&mut ps, "dec", &self.level_channels(), g_channels, &mut rng);
        ps
    }
}

pub struct ModelOutput {
    /// [1, H, W] depth in (d_min, d_max), full input resolution.
    pub depth: NodeId,
    /// [1, H/2, W/2] raw head output.
    pub logits: NodeId,
}

/// Build the forward pass on an existing graph. `image` is a [3,H,W]
/// leaf.
pub fn forward(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<ModelOutput> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "model expects a [3,H,W] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    cfg.validate(h, w)?;

    let swin_out = swin::encode_transformer(g, bp, "swin", image, &cfg.swin)?;
    let gmap = if cfg.use_conv_branch {
        Some(conv_branch::encode_conv(g, bp, "conv", image, &cfg.conv)?)
    } else {
        None
    };

    let (levels, gmap) = if cfg.use_hahi {
        let out = hahi::hahi(g, bp, "hahi", &swin_out.level_grids, gmap, &cfg.hahi_config())?;
        (out.levels, out.g)
    } else {
        (swin_out.level_grids, gmap)
    };

    let logits = decoder::decode(g, bp, "dec", &levels, gmap)?;
    let depth = decoder::depth_head(g, logits, cfg.range, h, w)?;
    Ok(ModelOutput { depth, logits })
}

/// Attach the training loss to a predicted depth node.
pub fn silog_loss(
    g: &mut Graph,
    pred: NodeId,
    gt: &DepthMap,
    lambda: f64,
    alpha: f64,
) -> Result<NodeId> {
    g.apply(
        ops::SilogLoss {
            gt: gt.values().to_vec(),
            valid: gt.valid().to_vec(),
            lambda,
            alpha,
        },
        &[pred],
    )
}

/// One full forward + loss graph over a single sample.
pub struct LossGraph<'a> {
    pub graph: Graph,
    pub bound: BoundParams<'a>,
    pub depth: NodeId,
    pub loss: NodeId,
}

pub fn forward_loss<'a>(
    cfg: &ModelConfig,
    ps: &'a ParamSet,
    image: &Tensor,
    gt: &DepthMap,
) -> Result<LossGraph<'a>> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, ps);
    let img = g.leaf(image.clone());
    let out = forward(&mut g, &bp, cfg, img)?;
    let loss = silog_loss(&mut g, out.depth, gt, cfg.silog_lambda, cfg.silog_alpha)?;
    Ok(LossGraph {
        graph: g,
        bound: bp,
        depth: out.depth,
        loss,
    })
}

/// Inference: depth tensor [1,H,W] for one image.
pub fn predict(cfg: &ModelConfig, ps: &ParamSet, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, ps);
    let img = g.leaf(image.clone());
    let out = forward(&mut g, &bp, cfg, img)?;
    Ok(g.value(out.depth).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(use_conv_branch: bool, use_hahi: bool) -> ModelConfig {
        ModelConfig {
            swin: BranchConfig {
                patch_size: 4,
                embed_dim: 8,
                depths: vec![1, 1],
                window: 2,
                heads: vec![2, 4],
                num_levels: 2,
            },
            conv: ConvBranchConfig { channels: 8 },
            attn: DeformAttnConfig { heads: 2, points: 2 },
            range: DepthRange::desk_default(),
            use_conv_branch,
            use_hahi,
            silog_lambda: SILOG_LAMBDA,
            silog_alpha: SILOG_ALPHA,
        }
    }

    fn sample_image(rng: &mut impl Rng) -> Tensor {
        Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, rng)
    }

    #[test]
    fn all_variants_forward_and_train_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = sample_image(&mut rng);
        let gt = DepthMap::from_positive(
            16,
            16,
            (0..256).map(|i| 1.0 + (i % 7) as f64).collect(),
        )
        .unwrap();

        for (cb, hh) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = tiny_config(cb, hh);
            let ps = cfg.init_params(1);
            let lg = forward_loss(&cfg, &ps, &image, &gt).unwrap();
            let depth = lg.graph.value(lg.depth);
            assert_eq!(depth.shape(), &[1, 16, 16], "{}", cfg.variant_name());
            for &d in depth.data() {
                assert!(d > cfg.range.d_min && d < cfg.range.d_max);
            }
            let loss = lg.graph.value(lg.loss).item();
            assert!(loss.is_finite() && loss > 0.0, "{}", cfg.variant_name());

            // a gradient reaches every parameter of the variant
            let g = lg.graph;
            let grads = g.backward(lg.loss, Tensor::scalar(1.0)).unwrap();
            let per_param = lg.bound.gradients(&g, &grads);
            let live = per_param
                .iter()
                .filter(|t| t.data().iter().any(|&v| v != 0.0))
                .count();
            // zero-initialized attention heads legitimately stall some
            // gradients at init; the bulk must be live
            assert!(
                live * 10 >= ps.len() * 8,
                "{}: only {live}/{} parameters got gradient",
                cfg.variant_name(),
                ps.len()
            );
        }
    }

    #[test]
    fn variant_names_and_param_sets_differ() {
        let names: Vec<&str> = [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .map(|&(cb, hh)| tiny_config(cb, hh).variant_name())
            .collect();
        assert_eq!(names, ["baseline", "+CB", "+HAHI", "+CB+HAHI"]);

        let base = tiny_config(false, false).init_params(1);
        let full = tiny_config(true, true).init_params(1);
        assert!(full.len() > base.len());
        assert!(base.names().all(|n| n.starts_with("swin.") || n.starts_with("dec.")));
        assert!(full.names().any(|n| n.starts_with("hahi.")));
        assert!(full.names().any(|n| n.starts_with("conv.")));
    }

    #[test]
    fn prediction_is_deterministic_in_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = sample_image(&mut rng);
        let cfg = tiny_config(true, true);
        let a = predict(&cfg, &cfg.init_params(5), &image).unwrap();
        let b = predict(&cfg, &cfg.init_params(5), &image).unwrap();
        assert_eq!(a.data(), b.data());
        let c = predict(&cfg, &cfg.init_params(6), &image).unwrap();
        assert_ne!(a.data(), c.data());
    }
}
