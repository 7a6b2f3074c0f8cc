//! The fusion neck between the encoder branches and the decoder.
//!
//! Aggregation side: every pyramid level is projected to a shared width,
//! flattened, and concatenated into one token list; deformable
//! self-attention mixes information across scales; the enhanced tokens
//! are folded back into per-level grids and fused with the originals by
//! channel concatenation and a 1×1 convolution, so each output level
//! keeps its input shape.
//!
//! Interaction side: the conv-branch map G, when present, is projected
//! to the same width and queries the enhanced tokens with deformable
//! cross-attention from reference points predicted per query (linear +
//! sigmoid), then gets the same concat-and-project fusion.

use crate::deform::{self, DeformAttnConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::{LevelIndexMap, LevelShape};
use crate::tensor::Tensor;
use rand::Rng;

const INIT_STD: f64 = 0.02;

/// Shared token width C_h: the median level width, rounded up so the
/// attention heads divide it.
pub fn hidden_channels(level_channels: &[usize], heads: usize) -> usize {
    assert!(!level_channels.is_empty() && heads > 0);
    let mut sorted = level_channels.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let med = if n % 2 == 0 {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    } else {
        sorted[n / 2]
    };
    (med + heads - 1) / heads * heads
}

#[derive(Clone, Copy, Debug)]
pub struct HahiConfig {
    /// Width C_h the levels are projected to for attention.
    pub hidden: usize,
    pub attn: DeformAttnConfig,
}

impl HahiConfig {
    pub fn for_channels(level_channels: &[usize], attn: DeformAttnConfig) -> Self {
        HahiConfig {
            hidden: hidden_channels(level_channels, attn.heads),
            attn,
        }
    }
}

pub fn init_params(
    ps: &mut ParamSet,
    prefix: &str,
    level_channels: &[usize],
    g_channels: Option<usize>,
    cfg: &HahiConfig,
    rng: &mut impl Rng,
) {
    let ch = cfg.hidden;
    let nl = level_channels.len();
    for (n, &c) in level_channels.iter().enumerate() {
        nn::init_conv(ps, &format!("{prefix}.proj{n}"), ch, c, 1, rng);
    }
    ps.add(
        format!("{prefix}.level_embed"),
        Tensor::rand_normal(&[nl, ch], INIT_STD, rng),
    );
    deform::init_params(ps, &format!("{prefix}.dsa"), ch, nl, &cfg.attn, rng);
    for (n, &c) in level_channels.iter().enumerate() {
        nn::init_conv(ps, &format!("{prefix}.fuse{n}"), c, c + ch, 1, rng);
    }
    if let Some(cg) = g_channels {
        nn::init_conv(ps, &format!("{prefix}.gproj"), ch, cg, 1, rng);
        nn::init_linear(ps, &format!("{prefix}.gref"), ch, 2, 0.0, rng);
        deform::init_params(ps, &format!("{prefix}.dca"), ch, nl, &cfg.attn, rng);
        nn::init_conv(ps, &format!("{prefix}.gfuse"), cg, cg + ch, 1, rng);
    }
}

pub struct HahiOutput {
    /// Fused pyramid levels, same shapes as the inputs.
    pub levels: Vec<NodeId>,
    /// Fused conv-branch map, when one was given.
    pub g: Option<NodeId>,
    /// [ΣHW, C_h] self-attention queries (tokens + level embedding).
    pub dsa_queries: NodeId,
}

pub fn hahi(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    pyramid: &[NodeId],
    gmap: Option<NodeId>,
    cfg: &HahiConfig,
) -> Result<HahiOutput> {
    if pyramid.is_empty() {
        return Err(Error::invalid("hahi: empty pyramid"));
    }
    let ch = cfg.hidden;
    let mut hidden_shapes = Vec::with_capacity(pyramid.len());
    for &node in pyramid {
        let s = g.value(node).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!(
                "hahi: pyramid level must be [C,H,W], got {s:?}"
            )));
        }
        hidden_shapes.push(LevelShape { c: ch, h: s[1], w: s[2] });
    }
    let index_map = LevelIndexMap::new(hidden_shapes.clone());

    // project to the shared width and flatten
    let mut level_rows = Vec::with_capacity(pyramid.len());
    for (n, &node) in pyramid.iter().enumerate() {
        let p = nn::conv(g, bp, &format!("{prefix}.proj{n}"), node, 1, 0)?;
        level_rows.push(g.apply(ops::GridToRows, &[p])?);
    }
    let rows = if level_rows.len() == 1 {
        level_rows[0]
    } else {
        g.apply(ops::ConcatRows, &level_rows)?
    };

    // each token queries with its level's embedding added
    let embed_idx: Vec<usize> = hidden_shapes
        .iter()
        .enumerate()
        .flat_map(|(n, s)| std::iter::repeat(n).take(s.h * s.w))
        .collect();
    let embeds = g.apply(
        ops::GatherRows(embed_idx),
        &[bp.id(&format!("{prefix}.level_embed"))],
    )?;
    let queries = g.apply(ops::Add, &[rows, embeds])?;

    let refs = g.leaf(deform::grid_reference_points(&hidden_shapes));
    let dsa = deform::deform_attn(
        g,
        bp,
        &format!("{prefix}.dsa"),
        queries,
        refs,
        rows,
        &hidden_shapes,
        &cfg.attn,
    )?;

    // fold the enhanced tokens back and fuse level by level
    let mut fused = Vec::with_capacity(pyramid.len());
    for (n, &node) in pyramid.iter().enumerate() {
        let range = index_map.level_range(n);
        let rows_n = g.apply(
            ops::SliceRows { start: range.start, end: range.end },
            &[dsa.out],
        )?;
        let enh = g.apply(
            ops::RowsToGrid { h: hidden_shapes[n].h, w: hidden_shapes[n].w },
            &[rows_n],
        )?;
        let cat = g.apply(ops::ConcatChannels, &[node, enh])?;
        fused.push(nn::conv(g, bp, &format!("{prefix}.fuse{n}"), cat, 1, 0)?);
    }

    // G queries the enhanced tokens from predicted reference points
    let g_out = match gmap {
        None => None,
        Some(gm) => {
            let gs = g.value(gm).shape().to_vec();
            if gs.len() != 3 {
                return Err(Error::invalid(format!(
                    "hahi: G must be [C,H,W], got {gs:?}"
                )));
            }
            let gh = nn::conv(g, bp, &format!("{prefix}.gproj"), gm, 1, 0)?;
            let grows = g.apply(ops::GridToRows, &[gh])?;
            let lin = nn::linear(g, bp, &format!("{prefix}.gref"), grows)?;
            let grefs = g.apply(ops::Sigmoid, &[lin])?;
            let dca = deform::deform_attn(
                g,
                bp,
                &format!("{prefix}.dca"),
                grows,
                grefs,
                dsa.out,
                &hidden_shapes,
                &cfg.attn,
            )?;
            let att = g.apply(ops::RowsToGrid { h: gs[1], w: gs[2] }, &[dca.out])?;
            let cat = g.apply(ops::ConcatChannels, &[gm, att])?;
            Some(nn::conv(g, bp, &format!("{prefix}.gfuse"), cat, 1, 0)?)
        }
    };

    Ok(HahiOutput {
        levels: fused,
        g: g_out,
        dsa_queries: queries,
    })
}

/// Reconfigure an initialized parameter set so the whole module is the
/// identity: attention output projections are zeroed and every fusion
/// kernel selects exactly the original channels. Used by the invariance
/// tests.
pub fn configure_passthrough(
    ps: &mut ParamSet,
    prefix: &str,
    level_channels: &[usize],
    g_channels: Option<usize>,
    cfg: &HahiConfig,
) -> Result<()> {
    let ch = cfg.hidden;
    fn zero(ps: &mut ParamSet, name: String) -> Result<()> {
        let shape = ps
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .shape()
            .to_vec();
        ps.set(&name, Tensor::zeros(&shape))
    }
    fn selector(c: usize, extra: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, c + extra, 1, 1]);
        for i in 0..c {
            k.set(&[i, i, 0, 0], 1.0);
        }
        k
    }
    zero(ps, format!("{prefix}.dsa.out.w"))?;
    zero(ps, format!("{prefix}.dsa.out.b"))?;
    for (n, &c) in level_channels.iter().enumerate() {
        ps.set(&format!("{prefix}.fuse{n}.w"), selector(c, ch))?;
        zero(ps, format!("{prefix}.fuse{n}.b"))?;
    }
    if let Some(cg) = g_channels {
        zero(ps, format!("{prefix}.dca.out.w"))?;
        zero(ps, format!("{prefix}.dca.out.b"))?;
        ps.set(&format!("{prefix}.gfuse.w"), selector(cg, ch))?;
        zero(ps, format!("{prefix}.gfuse.b"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CHANNELS: [usize; 2] = [4, 8];

    fn cfg() -> HahiConfig {
        HahiConfig::for_channels(&CHANNELS, DeformAttnConfig { heads: 2, points: 2 })
    }

    fn mini_inputs(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) {
        let p = vec![
            Tensor::rand_normal(&[4, 4, 4], 1.0, rng),
            Tensor::rand_normal(&[8, 2, 2], 1.0, rng),
        ];
        let gmap = Tensor::rand_normal(&[6, 4, 4], 1.0, rng);
        (p, gmap)
    }

    #[test]
    fn hidden_width_is_rounded_median() {
        assert_eq!(hidden_channels(&[32, 64, 128, 256], 8), 96);
        assert_eq!(hidden_channels(&[4, 8], 2), 6);
        assert_eq!(hidden_channels(&[3, 10, 50], 4), 12);
    }

    #[test]
    fn shapes_preserved() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "hahi", &CHANNELS, Some(6), &cfg, &mut rng);
        let (pyr, gmap) = mini_inputs(&mut rng);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let nodes: Vec<NodeId> = pyr.iter().map(|t| g.leaf(t.clone())).collect();
        let gid = g.leaf(gmap);
        let out = hahi(&mut g, &bp, "hahi", &nodes, Some(gid), &cfg).unwrap();
        assert_eq!(g.value(out.levels[0]).shape(), &[4, 4, 4]);
        assert_eq!(g.value(out.levels[1]).shape(), &[8, 2, 2]);
        assert_eq!(g.value(out.g.unwrap()).shape(), &[6, 4, 4]);
        assert_eq!(g.value(out.dsa_queries).shape(), &[20, cfg.hidden]);
    }

    #[test]
    fn passthrough_is_bit_identity() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "hahi", &CHANNELS, Some(6), &cfg, &mut rng);
        configure_passthrough(&mut ps, "hahi", &CHANNELS, Some(6), &cfg).unwrap();
        let (pyr, gmap) = mini_inputs(&mut rng);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let nodes: Vec<NodeId> = pyr.iter().map(|t| g.leaf(t.clone())).collect();
        let gid = g.leaf(gmap.clone());
        let out = hahi(&mut g, &bp, "hahi", &nodes, Some(gid), &cfg).unwrap();
        for (node, want) in out.levels.iter().zip(&pyr) {
            assert_eq!(g.value(*node).data(), want.data(), "level passthrough");
        }
        assert_eq!(g.value(out.g.unwrap()).data(), gmap.data(), "G passthrough");
    }

    #[test]
    fn level_embed_distinguishes_identical_content() {
        // zero projections with a shared bias: every token is identical
        // before the level embedding, so any difference between levels
        // comes from the embedding alone.
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "hahi", &CHANNELS, None, &cfg, &mut rng);
        for n in 0..CHANNELS.len() {
            let w = ps.get(&format!("hahi.proj{n}.w")).unwrap().shape().to_vec();
            ps.set(&format!("hahi.proj{n}.w"), Tensor::zeros(&w)).unwrap();
            ps.set(
                &format!("hahi.proj{n}.b"),
                Tensor::from_fn(&[cfg.hidden], |i| 0.1 * i as f64),
            )
            .unwrap();
        }
        let (pyr, _) = mini_inputs(&mut rng);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let nodes: Vec<NodeId> = pyr.iter().map(|t| g.leaf(t.clone())).collect();
        let out = hahi(&mut g, &bp, "hahi", &nodes, None, &cfg).unwrap();
        let q = g.value(out.dsa_queries);
        let row = |r: usize| &q.data()[r * cfg.hidden..(r + 1) * cfg.hidden];
        // within a level: identical; across levels: distinct
        assert_eq!(row(0), row(15), "same level, same embedding");
        assert_eq!(row(16), row(19), "same level, same embedding");
        assert_ne!(row(0), row(16), "levels must be distinguishable");
    }

    #[test]
    fn gradients_reach_key_parameters() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "hahi", &CHANNELS, Some(6), &cfg, &mut rng);
        // wake the zero-initialized heads so every path is live
        for (name, t) in ps.iter_mut() {
            if name.contains(".offset.") || name.contains(".weight.") || name.contains(".gref.") {
                *t = Tensor::rand_normal(t.shape(), 0.3, &mut rng);
            }
        }
        let (pyr, gmap) = mini_inputs(&mut rng);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let nodes: Vec<NodeId> = pyr.iter().map(|t| g.leaf(t.clone())).collect();
        let gid = g.leaf(gmap);
        let out = hahi(&mut g, &bp, "hahi", &nodes, Some(gid), &cfg).unwrap();
        let mut total = g.apply(ops::SumAll, &[out.levels[0]]).unwrap();
        for &n in &out.levels[1..] {
            let s = g.apply(ops::SumAll, &[n]).unwrap();
            total = g.apply(ops::Add, &[total, s]).unwrap();
        }
        let sg = g.apply(ops::SumAll, &[out.g.unwrap()]).unwrap();
        total = g.apply(ops::Add, &[total, sg]).unwrap();
        let grads = g.backward(total, Tensor::scalar(1.0)).unwrap();

        for name in [
            "hahi.level_embed",
            "hahi.proj0.w",
            "hahi.dsa.offset.w",
            "hahi.dsa.value.w",
            "hahi.fuse1.w",
            "hahi.gref.w",
            "hahi.dca.value.w",
            "hahi.gfuse.w",
        ] {
            let gt = grads.wrt(bp.id(name), &g);
            assert!(
                gt.data().iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
    }
}
