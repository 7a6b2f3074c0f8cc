//! The transformer branch: patch partition + linear embedding, stages of
//! shifted-window attention layers joined by patch merging, and the
//! reassembly of the last N stage outputs into a feature pyramid.
//!
//! Token grids travel as [T, C] row matrices (T = Hg·Wg, row-major
//! pixels); window partitioning, cyclic shifts and patch merging are all
//! row gathers, so the whole branch differentiates through the same op
//! set as everything else.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::LevelShape;
use crate::tensor::Tensor;
use rand::Rng;

/// Additive pre-softmax bias used to forbid attention across wrapped
/// window regions; exp(-1e9) underflows to exactly 0 in f64.
const MASK_NEG: f64 = -1e9;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct BranchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Transformer layers per stage.
    pub depths: Vec<usize>,
    pub window: usize,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// How many stage-end feature maps to emit (the last N stages).
    pub num_levels: usize,
}

impl BranchConfig {
    /// Desk-scale defaults; structure matches the full-size model, the
    /// widths do not.
    pub fn desk_default() -> Self {
        BranchConfig {
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            window: 4,
            heads: vec![2, 4, 8, 16],
            num_levels: 4,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width of a stage (doubles per merge).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Validate an input size and lay out the per-stage token grids.
    /// Returns the shapes of the emitted pyramid levels.
    pub fn validate(&self, h: usize, w: usize) -> Result<Vec<LevelShape>> {
        let s = self.num_stages();
        if s == 0 || self.heads.len() != s {
            return Err(Error::invalid(
                "branch config: depths and heads must list the same positive number of stages",
            ));
        }
        if self.num_levels == 0 || self.num_levels > s {
            return Err(Error::invalid(format!(
                "branch config: num_levels {} must be in 1..={s}",
                self.num_levels
            )));
        }
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by patch size {p}; extents must be multiples of {p}"
            )));
        }
        let (mut gh, mut gw) = (h / p, w / p);
        let mut shapes = Vec::new();
        for stage in 0..s {
            let c = self.stage_channels(stage);
            if c % self.heads[stage] != 0 {
                return Err(Error::invalid(format!(
                    "stage {stage}: channels {c} not divisible by {} heads",
                    self.heads[stage]
                )));
            }
            let eff = effective_window(self.window, gh, gw);
            if gh % eff != 0 || gw % eff != 0 {
                return Err(Error::invalid(format!(
                    "stage {stage}: token grid {gh}x{gw} not divisible by window {eff}; \
                     grid extents must be multiples of the window"
                )));
            }
            shapes.push(LevelShape { c, h: gh, w: gw });
            if stage + 1 < s {
                if gh % 2 != 0 || gw % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "stage {stage}: token grid {gh}x{gw} has odd extents, cannot patch-merge"
                    )));
                }
                gh /= 2;
                gw /= 2;
            }
        }
        Ok(shapes[s - self.num_levels..].to_vec())
    }
}

/// Window size clamped to the token grid, so coarse stages whose grid is
/// smaller than the configured window degrade to full attention instead
/// of being rejected.
pub(crate) fn effective_window(window: usize, gh: usize, gw: usize) -> usize {
    window.min(gh).min(gw)
}

/// Row-gather indices that turn a row-major token grid into window-major
/// order (each window's tokens contiguous), pulling from cyclically
/// shifted positions, plus the inverse gather.
fn partition_indices(gh: usize, gw: usize, win: usize, shift: usize) -> (Vec<usize>, Vec<usize>) {
    let mut gather = Vec::with_capacity(gh * gw);
    for wy in 0..gh / win {
        for wx in 0..gw / win {
            for iy in 0..win {
                for ix in 0..win {
                    let ry = wy * win + iy;
                    let rx = wx * win + ix;
                    gather.push(((ry + shift) % gh) * gw + (rx + shift) % gw);
                }
            }
        }
    }
    let mut inv = vec![0usize; gather.len()];
    for (k, &src) in gather.iter().enumerate() {
        inv[src] = k;
    }
    (gather, inv)
}

/// Region id along one axis of the shifted grid. The cyclic shift puts
/// the wrap seam inside the last window; positions past extent−shift
/// hold wrapped-around tokens and positions in [extent−win, extent−shift)
/// hold the tokens just before the seam. Tokens in different regions are
/// not spatial neighbors and must not attend to each other.
fn region_id(v: usize, extent: usize, win: usize, shift: usize) -> usize {
    if v < extent - win {
        0
    } else if v < extent - shift {
        1
    } else {
        2
    }
}

/// Per-window additive attention masks for the shifted partition; None
/// when every token of the window shares a region (no seam inside).
fn window_masks(gh: usize, gw: usize, win: usize, shift: usize) -> Vec<Option<Tensor>> {
    let ww = win * win;
    let mut masks = Vec::new();
    for wy in 0..gh / win {
        for wx in 0..gw / win {
            let rids: Vec<usize> = (0..ww)
                .map(|i| {
                    let ry = wy * win + i / win;
                    let rx = wx * win + i % win;
                    3 * region_id(ry, gh, win, shift) + region_id(rx, gw, win, shift)
                })
                .collect();
            if rids.iter().all(|&r| r == rids[0]) {
                masks.push(None);
                continue;
            }
            let mut m = Tensor::zeros(&[ww, ww]);
            for i in 0..ww {
                for j in 0..ww {
                    if rids[i] != rids[j] {
                        m.set(&[i, j], MASK_NEG);
                    }
                }
            }
            masks.push(Some(m));
        }
    }
    masks
}

/// Token-grid geometry a window-attention layer operates on.
#[derive(Clone, Copy, Debug)]
pub struct GridDims {
    pub gh: usize,
    pub gw: usize,
    pub channels: usize,
    pub heads: usize,
}

pub fn init_window_msa(ps: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl Rng) {
    nn::init_linear(ps, &format!("{prefix}.q"), channels, channels, INIT_STD, rng);
    // the key projection carries no bias: a per-query constant score
    // shift is invisible to softmax, so a key bias can never train
    ps.add(
        format!("{prefix}.k.w"),
        Tensor::rand_normal(&[channels, channels], INIT_STD, rng),
    );
    nn::init_linear(ps, &format!("{prefix}.v"), channels, channels, INIT_STD, rng);
    nn::init_linear(ps, &format!("{prefix}.o"), channels, channels, INIT_STD, rng);
}

/// Multi-head self-attention within (optionally shifted) windows over a
/// token grid given as rows [gh·gw, C].
pub fn window_msa(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    dims: GridDims,
    window: usize,
    shift: bool,
) -> Result<NodeId> {
    let GridDims {
        gh,
        gw,
        channels,
        heads,
    } = dims;
    if g.value(x).shape() != [gh * gw, channels] {
        return Err(Error::ShapeMismatch {
            op: "window_msa",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![gh * gw, channels],
        });
    }
    if channels % heads != 0 {
        return Err(Error::invalid(format!(
            "window_msa: channels {channels} not divisible by {heads} heads"
        )));
    }
    let eff = effective_window(window, gh, gw);
    if gh % eff != 0 || gw % eff != 0 {
        return Err(Error::invalid(format!(
            "window_msa: grid {gh}x{gw} not divisible by window {eff}"
        )));
    }
    // A single window spanning the grid has nothing to shift across.
    let shift_on = shift && gh.min(gw) > eff && eff >= 2;
    let s = if shift_on { eff / 2 } else { 0 };

    let q = nn::linear(g, bp, &format!("{prefix}.q"), x)?;
    let k = g.apply(ops::MatMul, &[x, bp.id(&format!("{prefix}.k.w"))])?;
    let v = nn::linear(g, bp, &format!("{prefix}.v"), x)?;

    let (gather, inv) = partition_indices(gh, gw, eff, s);
    let qw = g.apply(ops::GatherRows(gather.clone()), &[q])?;
    let kw = g.apply(ops::GatherRows(gather.clone()), &[k])?;
    let vw = g.apply(ops::GatherRows(gather), &[v])?;

    let masks = if shift_on {
        window_masks(gh, gw, eff, s)
    } else {
        vec![None; (gh / eff) * (gw / eff)]
    };

    let ww = eff * eff;
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut window_outputs = Vec::with_capacity(masks.len());
    for (wi, mask) in masks.iter().enumerate() {
        let r0 = wi * ww;
        let qwin = g.apply(ops::SliceRows { start: r0, end: r0 + ww }, &[qw])?;
        let kwin = g.apply(ops::SliceRows { start: r0, end: r0 + ww }, &[kw])?;
        let vwin = g.apply(ops::SliceRows { start: r0, end: r0 + ww }, &[vw])?;
        let mask_leaf = mask.as_ref().map(|m| g.leaf(m.clone()));

        let mut head_outputs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let cols = ops::SliceCols {
                start: hi * dh,
                end: (hi + 1) * dh,
            };
            let qh = g.apply(ops::SliceCols { ..cols }, &[qwin])?;
            let kh = g.apply(ops::SliceCols { ..cols }, &[kwin])?;
            let vh = g.apply(ops::SliceCols { ..cols }, &[vwin])?;
            let kt = g.apply(ops::Transpose2d, &[kh])?;
            let mut scores = g.apply(ops::MatMul, &[qh, kt])?;
            scores = g.apply(ops::Scale(scale), &[scores])?;
            if let Some(m) = mask_leaf {
                scores = g.apply(ops::Add, &[scores, m])?;
            }
            let attn = g.apply(ops::Softmax { axis: 1 }, &[scores])?;
            head_outputs.push(g.apply(ops::MatMul, &[attn, vh])?);
        }
        window_outputs.push(g.apply(ops::ConcatCols, &head_outputs)?);
    }
    let stacked = g.apply(ops::ConcatRows, &window_outputs)?;
    let restored = g.apply(ops::GatherRows(inv), &[stacked])?;
    nn::linear(g, bp, &format!("{prefix}.o"), restored)
}

pub fn init_transformer_layer(
    ps: &mut ParamSet,
    prefix: &str,
    channels: usize,
    rng: &mut impl Rng,
) {
    nn::init_layer_norm(ps, &format!("{prefix}.ln1"), channels);
    init_window_msa(ps, &format!("{prefix}.msa"), channels, rng);
    nn::init_layer_norm(ps, &format!("{prefix}.ln2"), channels);
    nn::init_linear(
        ps,
        &format!("{prefix}.mlp1"),
        channels,
        4 * channels,
        INIT_STD,
        rng,
    );
    nn::init_linear(
        ps,
        &format!("{prefix}.mlp2"),
        4 * channels,
        channels,
        INIT_STD,
        rng,
    );
}

/// One two-residual transformer layer:
/// ẑ = MSA(LN(z)) + z; out = MLP(LN(ẑ)) + ẑ.
pub fn transformer_layer(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    dims: GridDims,
    window: usize,
    shift: bool,
) -> Result<NodeId> {
    let ln1 = nn::layer_norm(g, bp, &format!("{prefix}.ln1"), x)?;
    let msa = window_msa(g, bp, &format!("{prefix}.msa"), ln1, dims, window, shift)?;
    let zhat = g.apply(ops::Add, &[msa, x])?;

    let ln2 = nn::layer_norm(g, bp, &format!("{prefix}.ln2"), zhat)?;
    let h = nn::linear(g, bp, &format!("{prefix}.mlp1"), ln2)?;
    let h = nn::gelu(g, h)?;
    let h = nn::linear(g, bp, &format!("{prefix}.mlp2"), h)?;
    g.apply(ops::Add, &[h, zhat])
}

pub fn init_patch_merge(ps: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl Rng) {
    nn::init_layer_norm(ps, &format!("{prefix}.ln"), 4 * channels);
    // reduction is linear without bias, as is conventional
    ps.add(
        format!("{prefix}.w"),
        Tensor::rand_normal(&[4 * channels, 2 * channels], INIT_STD, rng),
    );
}

/// 2×2 token concatenation + LayerNorm + linear reduction:
/// [gh·gw, C] → [gh·gw/4, 2C].
pub fn patch_merge(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    gh: usize,
    gw: usize,
) -> Result<NodeId> {
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch_merge: grid {gh}x{gw} has odd extents"
        )));
    }
    let c = g.value(x).shape()[1];
    // order each output pixel's 2x2 block TL,TR,BL,BR in consecutive rows
    let mut gather = Vec::with_capacity(gh * gw);
    for y in 0..gh / 2 {
        for xg in 0..gw / 2 {
            gather.push((2 * y) * gw + 2 * xg);
            gather.push((2 * y) * gw + 2 * xg + 1);
            gather.push((2 * y + 1) * gw + 2 * xg);
            gather.push((2 * y + 1) * gw + 2 * xg + 1);
        }
    }
    let blocks = g.apply(ops::GatherRows(gather), &[x])?;
    let wide = g.apply(ops::Reshape(vec![gh * gw / 4, 4 * c]), &[blocks])?;
    let normed = nn::layer_norm(g, bp, &format!("{prefix}.ln"), wide)?;
    g.apply(ops::MatMul, &[normed, bp.id(&format!("{prefix}.w"))])
}

pub fn init_params(ps: &mut ParamSet, prefix: &str, cfg: &BranchConfig, rng: &mut impl Rng) {
    let p = cfg.patch_size;
    nn::init_linear(
        ps,
        &format!("{prefix}.embed"),
        3 * p * p,
        cfg.embed_dim,
        INIT_STD,
        rng,
    );
    for stage in 0..cfg.num_stages() {
        let c = cfg.stage_channels(stage);
        for layer in 0..cfg.depths[stage] {
            init_transformer_layer(ps, &format!("{prefix}.s{stage}.l{layer}"), c, rng);
        }
        if stage + 1 < cfg.num_stages() {
            init_patch_merge(ps, &format!("{prefix}.merge{stage}"), c, rng);
        }
    }
}

/// Patch partition + linear embedding: [3,H,W] → [H/p·W/p, C] tokens.
pub fn patch_partition_embed(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    image: NodeId,
    p: usize,
) -> Result<NodeId> {
    let rows = g.apply(ops::PatchExtract { p }, &[image])?;
    nn::linear(g, bp, &format!("{prefix}.embed"), rows)
}

/// The transformer branch output: the last N stage-end token grids, as
/// both row matrices and [C,H,W] grids.
pub struct SwinOutput {
    pub level_rows: Vec<NodeId>,
    pub level_grids: Vec<NodeId>,
    pub shapes: Vec<LevelShape>,
}

pub fn encode_transformer(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    image: NodeId,
    cfg: &BranchConfig,
) -> Result<SwinOutput> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "encode_transformer expects a [3,H,W] image, got {shape:?}"
        )));
    }
    let level_shapes = cfg.validate(shape[1], shape[2])?;
    let first_emitted = cfg.num_stages() - cfg.num_levels;

    let mut tokens = patch_partition_embed(g, bp, prefix, image, cfg.patch_size)?;
    let (mut gh, mut gw) = (shape[1] / cfg.patch_size, shape[2] / cfg.patch_size);

    let mut level_rows = Vec::new();
    let mut level_grids = Vec::new();
    for stage in 0..cfg.num_stages() {
        let dims = GridDims {
            gh,
            gw,
            channels: cfg.stage_channels(stage),
            heads: cfg.heads[stage],
        };
        for layer in 0..cfg.depths[stage] {
            tokens = transformer_layer(
                g,
                bp,
                &format!("{prefix}.s{stage}.l{layer}"),
                tokens,
                dims,
                cfg.window,
                layer % 2 == 1,
            )?;
        }
        if stage >= first_emitted {
            level_rows.push(tokens);
            level_grids.push(g.apply(ops::RowsToGrid { h: gh, w: gw }, &[tokens])?);
        }
        if stage + 1 < cfg.num_stages() {
            tokens = patch_merge(g, bp, &format!("{prefix}.merge{stage}"), tokens, gh, gw)?;
            gh /= 2;
            gw /= 2;
        }
    }
    Ok(SwinOutput {
        level_rows,
        level_grids,
        shapes: level_shapes,
    })
}
