//! The standing finite-difference suite: several instances of every
//! differentiable op, checked end to end through [`crate::gradcheck`].
//!
//! Each case reduces the op output to a scalar through a fixed random
//! weighting, so transposition and permutation mistakes cannot cancel
//! out in the reduction. Sampling-op coordinates are kept away from
//! integer grid lines, where bilinear interpolation is not
//! differentiable.

use crate::conv_branch::{self, ConvBranchConfig};
use crate::decoder::{self, DepthRange};
use crate::deform::{self, DeformAttnConfig};
use crate::error::Result;
use crate::gradcheck::{check_graph, CheckOpts, GradCheckReport};
use crate::graph::{DiffOp, Graph, NodeId};
use crate::hahi::{self, HahiConfig};
use crate::ops::*;
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::LevelShape;
use crate::swin::{self, GridDims};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SuiteCase {
    pub name: String,
    pub inputs: Vec<(String, Tensor)>,
    pub build: Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>,
}

fn fnv(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Reduce an arbitrary tensor to a scalar with deterministic random
/// weights so every output entry matters, with a distinct coefficient.
fn reduce(g: &mut Graph, id: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(id).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = g.leaf(Tensor::rand_uniform(&shape, 0.25, 1.75, &mut rng));
    let weighted = g.apply(Mul, &[id, weights])?;
    g.apply(SumAll, &[weighted])
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Fractional sampling points in a margin around an h×w map, rejected
/// away from integer coordinates so the finite-difference step never
/// crosses a bilinear cell boundary.
fn off_lattice_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        for extent in [w, h] {
            loop {
                let v = rng.gen_range(-1.0..extent as f64);
                if (v - v.round()).abs() > 0.05 {
                    data.push(v);
                    break;
                }
            }
        }
    }
    Tensor::new(vec![n, 2], data).unwrap()
}

struct CaseBuilder {
    seed: u64,
    cases: Vec<SuiteCase>,
}

impl CaseBuilder {
    /// Register one instance of `op` applied to `inputs` directly.
    fn op(&mut self, op: impl DiffOp + Clone + 'static, inputs: Vec<(&str, Tensor)>) {
        let index = self.cases.iter().filter(|c| {
            c.name.starts_with(op.name()) && c.name[op.name().len()..].starts_with('/')
        });
        let name = format!("{}/{}", op.name(), index.count());
        let reduce_seed = self.seed ^ fnv(&name);
        let inputs: Vec<(String, Tensor)> =
            inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let out = g.apply(op.clone(), ids)?;
            reduce(g, out, reduce_seed)
        };
        self.cases.push(SuiteCase {
            name,
            inputs,
            build: Box::new(build),
        });
    }

    fn rng(&self, tag: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv(tag))
    }
}

/// Every differentiable op, at least three instances each with varied
/// shapes and attributes.
pub fn suite(seed: u64) -> Vec<SuiteCase> {
    let mut b = CaseBuilder {
        seed,
        cases: Vec::new(),
    };
    let mut rng = b.rng("inputs");
    let mut t = |shape: &[usize]| tensor(&mut rng, shape, -2.0, 2.0);

    for shape in [&[2usize, 3] as &[usize], &[5], &[3, 2, 2]] {
        b.op(Add, vec![("a", t(shape)), ("b", t(shape))]);
        b.op(Mul, vec![("a", t(shape)), ("b", t(shape))]);
        b.op(Sigmoid, vec![("x", t(shape))]);
        b.op(Gelu, vec![("x", t(shape))]);
        b.op(SumAll, vec![("x", t(shape))]);
        b.op(MeanAll, vec![("x", t(shape))]);
    }
    for (c, shape) in [(2.5, &[2usize, 3] as &[usize]), (-0.4, &[4]), (0.0, &[2, 2])] {
        b.op(Scale(c), vec![("x", t(shape))]);
        b.op(AddScalar(c), vec![("x", t(shape))]);
    }

    for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 2, 2)] {
        b.op(MatMul, vec![("a", t(&[m, k])), ("b", t(&[k, n]))]);
    }
    for shape in [[2, 3], [1, 4], [3, 3]] {
        b.op(Transpose2d, vec![("x", t(&shape))]);
    }
    for (n, c) in [(3, 4), (2, 2), (5, 1)] {
        b.op(AddBiasRow, vec![("x", t(&[n, c])), ("b", t(&[c]))]);
        b.op(
            ColumnAffine,
            vec![("x", t(&[n, c])), ("g", t(&[c])), ("b", t(&[c]))],
        );
    }
    for (axis, shape) in [(1, [3, 4]), (0, [3, 4]), (1, [2, 5])] {
        b.op(Softmax { axis }, vec![("x", t(&shape))]);
    }
    // narrow rows keep a larger eps: with near-equal entries the
    // normalizer's curvature swamps the finite-difference probe
    for (eps, shape) in [(1e-5, [3, 4]), (1e-3, [2, 6]), (1e-2, [4, 2])] {
        b.op(
            LayerNorm { eps },
            vec![
                ("x", t(&shape)),
                ("g", t(&[shape[1]])),
                ("b", t(&[shape[1]])),
            ],
        );
    }

    for (from, to) in [
        (&[2usize, 6] as &[usize], vec![3, 4]),
        (&[4], vec![2, 2]),
        (&[2, 2, 3], vec![12]),
    ] {
        b.op(Reshape(to), vec![("x", t(from))]);
    }
    for (rows, c, idx) in [
        (5, 3, vec![0, 2, 4, 2]),
        (3, 2, vec![2, 1, 0]),
        (4, 1, vec![3, 3, 3]),
    ] {
        b.op(GatherRows(idx), vec![("x", t(&[rows, c]))]);
    }
    for (rows, c, start, end) in [(4, 2, 1, 3), (3, 3, 0, 1), (5, 4, 2, 5)] {
        b.op(SliceRows { start, end }, vec![("x", t(&[rows, c]))]);
        b.op(
            SliceCols {
                start: start.min(c - 1),
                end: end.min(c),
            },
            vec![("x", t(&[rows, c]))],
        );
    }
    for (a, bshape) in [([2, 3], [1, 3]), ([1, 2], [4, 2]), ([3, 1], [3, 1])] {
        b.op(ConcatRows, vec![("a", t(&a)), ("b", t(&bshape))]);
        let (ta, tb) = ([a[1], a[0]], [bshape[1], bshape[0]]);
        b.op(ConcatCols, vec![("a", t(&ta)), ("b", t(&tb))]);
    }
    for (c, h, w) in [(2, 3, 4), (1, 2, 2), (3, 1, 5)] {
        b.op(GridToRows, vec![("x", t(&[c, h, w]))]);
        b.op(RowsToGrid { h, w }, vec![("x", t(&[h * w, c]))]);
        b.op(
            ConcatChannels,
            vec![("a", t(&[c, h, w])), ("b", t(&[c + 1, h, w]))],
        );
        b.op(AddChannelBias, vec![("x", t(&[c, h, w])), ("b", t(&[c]))]);
        b.op(
            ChannelAffine,
            vec![("x", t(&[c, h, w])), ("g", t(&[c])), ("b", t(&[c]))],
        );
        b.op(UpsampleNearest2x, vec![("x", t(&[c, h, w]))]);
    }
    for (p, c, h, w) in [(2, 3, 4, 4), (1, 2, 3, 3), (2, 1, 2, 6)] {
        b.op(PatchExtract { p }, vec![("x", t(&[c, h, w]))]);
    }
    for (stride, pad, cin, cout, hw) in [(1, 1, 2, 3, 5), (2, 1, 1, 2, 4), (1, 0, 3, 4, 3)] {
        let k = if pad == 0 { 1 } else { 3 };
        b.op(
            Conv2d { stride, pad },
            vec![
                ("x", t(&[cin, hw, hw])),
                ("w", t(&[cout, cin, k, k])),
            ],
        );
    }
    for (c, hw, out_h, out_w) in [(2, 3, 4, 5), (1, 4, 2, 2), (2, 2, 5, 3)] {
        b.op(BilinearResize { out_h, out_w }, vec![("x", t(&[c, hw, hw]))]);
    }

    {
        let mut prng = b.rng("points");
        for (c, h, w, n) in [(2, 4, 4, 5), (1, 3, 5, 3), (3, 2, 2, 7)] {
            let pts = off_lattice_points(&mut prng, n, h, w);
            b.op(
                BilinearSample,
                vec![("map", t(&[c, h, w])), ("points", pts)],
            );
        }
    }
    for (q, k, c) in [(3, 2, 2), (1, 4, 3), (2, 1, 1)] {
        b.op(
            WeightedPointSum { k },
            vec![("w", t(&[q, k])), ("s", t(&[c, q * k]))],
        );
    }

    {
        let mut srng = b.rng("silog");
        for (n, lambda, mixed) in [(6, 0.85, false), (4, 1.0, true), (9, 0.5, true)] {
            let gt: Vec<f64> = (0..n).map(|_| srng.gen_range(0.5..3.0)).collect();
            let valid: Vec<bool> = (0..n).map(|i| !mixed || i % 3 != 1).collect();
            let pred = Tensor::rand_uniform(&[n], 0.5, 3.0, &mut srng);
            b.op(
                SilogLoss {
                    gt,
                    valid,
                    lambda,
                    alpha: 10.0,
                },
                vec![("pred", pred)],
            );
        }
    }

    b.cases
}

/// Run the whole suite; one report per case, in suite order.
pub fn run_suite(seed: u64, opts: &CheckOpts) -> Result<Vec<GradCheckReport>> {
    suite(seed)
        .into_iter()
        .map(|case| check_graph(&case.name, &case.inputs, case.build, opts))
        .collect()
}

/// Finite-difference margin kept between every bilinear sampling
/// position and the nearest integer grid line. Probing any input moves a
/// position by at most a few h = 1e-6, so 1e-3 keeps every probe inside
/// one bilinear cell.
const LATTICE_MARGIN: f64 = 1e-3;

fn frac_dist(v: f64) -> f64 {
    (v - v.round()).abs()
}

/// Offset biases whose fractional parts stay clear of grid lines. With
/// integer reference pixels (the self-attention grid), the sampling
/// position's fractional part equals the bias's.
fn safe_offset_bias(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| loop {
            let v = rng.gen_range(-0.85..0.85);
            if frac_dist(v) >= 0.1 {
                break v;
            }
        })
        .collect()
}

/// Reference points and offset biases for a cross-attention case,
/// resampled together until every base sampling position clears the
/// margin on both axes.
fn safe_refs_and_bias(
    rng: &mut ChaCha8Rng,
    q: usize,
    m: usize,
    kp: usize,
    levels: &[LevelShape],
) -> (Tensor, Vec<f64>) {
    let l = levels.len();
    'outer: loop {
        let refs: Vec<f64> = (0..q * 2).map(|_| rng.gen_range(0.1..0.9)).collect();
        let bias: Vec<f64> = (0..m * l * kp * 2)
            .map(|_| rng.gen_range(-0.85..0.85))
            .collect();
        for qi in 0..q {
            for (li, ls) in levels.iter().enumerate() {
                for mi in 0..m {
                    for ki in 0..kp {
                        let col = ((mi * l + li) * kp + ki) * 2;
                        let px = refs[qi * 2] * ls.w as f64 - 0.5 + bias[col];
                        let py = refs[qi * 2 + 1] * ls.h as f64 - 0.5 + bias[col + 1];
                        if frac_dist(px) < LATTICE_MARGIN || frac_dist(py) < LATTICE_MARGIN {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        return (Tensor::new(vec![q, 2], refs).unwrap(), bias);
    }
}

/// Reference-head bias and offset biases for the interaction path, where
/// the base reference is sigmoid(b) on every query (the reference head's
/// weights stay zero, as at init).
fn safe_gref_and_bias(
    rng: &mut ChaCha8Rng,
    m: usize,
    kp: usize,
    levels: &[LevelShape],
) -> ([f64; 2], Vec<f64>) {
    let l = levels.len();
    'outer: loop {
        let gb = [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let bias: Vec<f64> = (0..m * l * kp * 2)
            .map(|_| rng.gen_range(-0.85..0.85))
            .collect();
        for (li, ls) in levels.iter().enumerate() {
            for mi in 0..m {
                for ki in 0..kp {
                    let col = ((mi * l + li) * kp + ki) * 2;
                    let px = sig(gb[0]) * ls.w as f64 - 0.5 + bias[col];
                    let py = sig(gb[1]) * ls.h as f64 - 0.5 + bias[col + 1];
                    if frac_dist(px) < LATTICE_MARGIN || frac_dist(py) < LATTICE_MARGIN {
                        continue 'outer;
                    }
                }
            }
        }
        return (gb, bias);
    }
}

/// Re-draw every parameter at a healthy magnitude. The training-time
/// init is deliberately small, which leaves some analytic gradients near
/// the finite-difference noise floor when a residual keeps |f| large;
/// the check wants O(1) signal instead. Weights scale by fan-in so
/// activations keep unit variance at any depth; gain vectors stay near
/// one.
fn randomize_params(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (name, t) in ps.iter_mut() {
        let shape = t.shape();
        let fan_in: usize = match shape.len() {
            4 => shape[1] * shape[2] * shape[3],
            2 => shape[0],
            _ => 1,
        };
        let std = if shape.len() == 1 { 0.2 } else { 1.0 / (fan_in as f64).sqrt() };
        let mut fresh = Tensor::rand_normal(shape, std, rng);
        if name.ends_with(".g") {
            for v in fresh.data_mut() {
                *v += 1.0;
            }
        }
        *t = fresh;
    }
}

fn set_bias(ps: &mut ParamSet, name: &str, values: Vec<f64>) {
    let n = values.len();
    ps.set(name, Tensor::new(vec![n], values).unwrap()).unwrap();
}

fn zero_param(ps: &mut ParamSet, name: &str) {
    let shape = ps.get(name).expect("known parameter").shape().to_vec();
    ps.set(name, Tensor::zeros(&shape)).unwrap();
}

/// Flatten heterogeneous outputs into one column so a single random
/// reduction covers them all.
fn stack_outputs(g: &mut Graph, outs: &[NodeId]) -> Result<NodeId> {
    let mut cols = Vec::with_capacity(outs.len());
    for &o in outs {
        let n = g.value(o).numel();
        cols.push(g.apply(Reshape(vec![n, 1]), &[o])?);
    }
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        g.apply(ConcatRows, &cols)
    }
}

struct ModuleCases {
    seed: u64,
    cases: Vec<SuiteCase>,
}

impl ModuleCases {
    /// Register a composite-module case: every parameter in `ps` becomes
    /// a probed input, followed by the data tensors.
    fn case<F>(&mut self, name: &str, ps: ParamSet, data: Vec<(&str, Tensor)>, build: F)
    where
        F: Fn(&mut Graph, &BoundParams, &[NodeId]) -> Result<NodeId> + 'static,
    {
        let index = self
            .cases
            .iter()
            .filter(|c| c.name.starts_with(name) && c.name[name.len()..].starts_with('/'))
            .count();
        let full = format!("{name}/{index}");
        let reduce_seed = self.seed ^ fnv(&full);
        let mut inputs: Vec<(String, Tensor)> =
            ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let split = inputs.len();
        inputs.extend(data.into_iter().map(|(n, t)| (n.to_string(), t)));
        let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let bp = BoundParams::from_ids(&ps, ids[..split].to_vec());
            let out = build(g, &bp, &ids[split..])?;
            reduce(g, out, reduce_seed)
        };
        self.cases.push(SuiteCase {
            name: full,
            inputs,
            build: Box::new(build),
        });
    }

    fn rng(&self, tag: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv(tag))
    }
}

/// The composite building blocks, checked end to end with every
/// parameter treated as a probe input: window attention, transformer
/// layers, patch merging, the conv branch, both deformable attention
/// wirings, the fusion neck, and the decoder. Three instances each.
pub fn module_suite(seed: u64) -> Vec<SuiteCase> {
    let mut b = ModuleCases {
        seed,
        cases: Vec::new(),
    };

    {
        let mut rng = b.rng("window_msa");
        for (c, heads, gh, gw, window, shift) in
            [(4, 2, 4, 4, 2, false), (6, 3, 2, 2, 4, false), (4, 1, 4, 6, 2, true)]
        {
            let mut ps = ParamSet::new();
            swin::init_window_msa(&mut ps, "msa", c, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let x = tensor(&mut rng, &[gh * gw, c], -2.0, 2.0);
            let dims = GridDims { gh, gw, channels: c, heads };
            b.case("window_msa", ps, vec![("x", x)], move |g, bp, d| {
                swin::window_msa(g, bp, "msa", d[0], dims, window, shift)
            });
        }
    }

    {
        let mut rng = b.rng("transformer_layer");
        for (c, heads, gh, gw, window, shift) in
            [(4, 2, 2, 4, 2, false), (2, 1, 2, 2, 2, false), (4, 4, 4, 4, 2, true)]
        {
            let mut ps = ParamSet::new();
            swin::init_transformer_layer(&mut ps, "tl", c, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let x = tensor(&mut rng, &[gh * gw, c], -2.0, 2.0);
            let dims = GridDims { gh, gw, channels: c, heads };
            b.case("transformer_layer", ps, vec![("x", x)], move |g, bp, d| {
                swin::transformer_layer(g, bp, "tl", d[0], dims, window, shift)
            });
        }
    }

    {
        let mut rng = b.rng("patch_merge");
        for (c, gh, gw) in [(2, 2, 2), (3, 4, 2), (4, 2, 4)] {
            let mut ps = ParamSet::new();
            swin::init_patch_merge(&mut ps, "pm", c, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let x = tensor(&mut rng, &[gh * gw, c], -2.0, 2.0);
            b.case("patch_merge", ps, vec![("x", x)], move |g, bp, d| {
                swin::patch_merge(g, bp, "pm", d[0], gh, gw)
            });
        }
    }

    {
        let mut rng = b.rng("encode_conv");
        for (channels, h, w) in [(4, 8, 8), (2, 8, 8), (6, 8, 12)] {
            let cfg = ConvBranchConfig { channels };
            let mut ps = ParamSet::new();
            conv_branch::init_params(&mut ps, "cb", &cfg, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let img = tensor(&mut rng, &[3, h, w], -1.0, 1.0);
            b.case("encode_conv", ps, vec![("image", img)], move |g, bp, d| {
                conv_branch::encode_conv(g, bp, "cb", d[0], &cfg)
            });
        }
    }

    {
        let mut rng = b.rng("deform_self_attention");
        let shape_sets: [Vec<LevelShape>; 3] = [
            vec![LevelShape { c: 4, h: 3, w: 2 }, LevelShape { c: 4, h: 2, w: 1 }],
            vec![LevelShape { c: 3, h: 2, w: 2 }],
            vec![LevelShape { c: 8, h: 2, w: 2 }, LevelShape { c: 8, h: 1, w: 1 }],
        ];
        for ((m, kp), shapes) in [(2usize, 2usize), (1, 4), (8, 1)].into_iter().zip(shape_sets) {
            let c = shapes[0].c;
            let cfg = DeformAttnConfig { heads: m, points: kp };
            let mut ps = ParamSet::new();
            deform::init_params(&mut ps, "dsa", c, shapes.len(), &cfg, &mut rng);
            randomize_params(&mut ps, &mut rng);
            zero_param(&mut ps, "dsa.offset.w");
            let bias = safe_offset_bias(&mut rng, 2 * m * shapes.len() * kp);
            set_bias(&mut ps, "dsa.offset.b", bias);
            let rows: usize = shapes.iter().map(LevelShape::pixels).sum();
            let tokens = tensor(&mut rng, &[rows, c], -2.0, 2.0);
            b.case("deform_self_attention", ps, vec![("tokens", tokens)], move |g, bp, d| {
                let refs = g.leaf(deform::grid_reference_points(&shapes));
                let out = deform::deform_attn(g, bp, "dsa", d[0], refs, d[0], &shapes, &cfg)?;
                Ok(out.out)
            });
        }
    }

    {
        let mut rng = b.rng("deform_cross_attention");
        let shape_sets: [Vec<LevelShape>; 3] = [
            vec![LevelShape { c: 4, h: 2, w: 3 }, LevelShape { c: 4, h: 1, w: 2 }],
            vec![LevelShape { c: 6, h: 3, w: 3 }],
            vec![LevelShape { c: 2, h: 2, w: 2 }, LevelShape { c: 2, h: 1, w: 1 }],
        ];
        for ((q, m, kp), shapes) in [(3usize, 2usize, 2usize), (1, 3, 1), (5, 1, 3)]
            .into_iter()
            .zip(shape_sets)
        {
            let c = shapes[0].c;
            let cfg = DeformAttnConfig { heads: m, points: kp };
            let mut ps = ParamSet::new();
            deform::init_params(&mut ps, "dca", c, shapes.len(), &cfg, &mut rng);
            randomize_params(&mut ps, &mut rng);
            zero_param(&mut ps, "dca.offset.w");
            let (refs, bias) = safe_refs_and_bias(&mut rng, q, m, kp, &shapes);
            set_bias(&mut ps, "dca.offset.b", bias);
            let rows: usize = shapes.iter().map(LevelShape::pixels).sum();
            let queries = tensor(&mut rng, &[q, c], -2.0, 2.0);
            let values = tensor(&mut rng, &[rows, c], -2.0, 2.0);
            b.case(
                "deform_cross_attention",
                ps,
                vec![("queries", queries), ("refs", refs), ("values", values)],
                move |g, bp, d| {
                    let out = deform::deform_attn(g, bp, "dca", d[0], d[1], d[2], &shapes, &cfg)?;
                    Ok(out.out)
                },
            );
        }
    }

    {
        let mut rng = b.rng("hahi_forward");
        let instances: [(Vec<usize>, Vec<(usize, usize)>, Option<(usize, usize, usize)>, usize, usize); 3] = [
            (vec![4, 8], vec![(4, 4), (2, 2)], Some((6, 3, 2)), 2, 2),
            (vec![4], vec![(2, 4)], None, 2, 2),
            (vec![2, 4, 8], vec![(2, 4), (1, 2), (1, 1)], Some((5, 2, 2)), 2, 1),
        ];
        for (channels, spatial, gdims, m, kp) in instances {
            let attn = DeformAttnConfig { heads: m, points: kp };
            let cfg = HahiConfig::for_channels(&channels, attn);
            let gch = gdims.map(|(c, _, _)| c);
            let mut ps = ParamSet::new();
            hahi::init_params(&mut ps, "hahi", &channels, gch, &cfg, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let hidden_shapes: Vec<LevelShape> = spatial
                .iter()
                .map(|&(h, w)| LevelShape { c: cfg.hidden, h, w })
                .collect();
            let nl = channels.len();
            // sampling positions must not depend on probed activations,
            // so the offset and reference heads keep zero weights and
            // hand-safe biases (as at init, where they are zero too)
            zero_param(&mut ps, "hahi.dsa.offset.w");
            set_bias(
                &mut ps,
                "hahi.dsa.offset.b",
                safe_offset_bias(&mut rng, 2 * m * nl * kp),
            );
            if gch.is_some() {
                let (gb, bias) = safe_gref_and_bias(&mut rng, m, kp, &hidden_shapes);
                zero_param(&mut ps, "hahi.gref.w");
                zero_param(&mut ps, "hahi.dca.offset.w");
                set_bias(&mut ps, "hahi.gref.b", gb.to_vec());
                set_bias(&mut ps, "hahi.dca.offset.b", bias);
            }
            let mut data: Vec<(&str, Tensor)> = Vec::new();
            let names = ["level0", "level1", "level2"];
            for (i, (&c, &(h, w))) in channels.iter().zip(&spatial).enumerate() {
                data.push((names[i], tensor(&mut rng, &[c, h, w], -2.0, 2.0)));
            }
            if let Some((c, h, w)) = gdims {
                data.push(("gmap", tensor(&mut rng, &[c, h, w], -2.0, 2.0)));
            }
            b.case("hahi_forward", ps, data, move |g, bp, d| {
                let (levels, gmap) = if gch.is_some() {
                    (&d[..d.len() - 1], Some(d[d.len() - 1]))
                } else {
                    (d, None)
                };
                let out = hahi::hahi(g, bp, "hahi", levels, gmap, &cfg)?;
                let mut outs = out.levels;
                outs.extend(out.g);
                stack_outputs(g, &outs)
            });
        }
    }

    {
        let mut rng = b.rng("decode");
        let instances: [(Vec<(usize, usize, usize)>, Option<(usize, usize, usize)>, bool); 3] = [
            (vec![(4, 8, 8), (8, 4, 4)], Some((6, 8, 8)), false),
            (vec![(2, 4, 4)], None, true),
            (vec![(2, 8, 8), (4, 4, 4), (8, 2, 2)], None, false),
        ];
        for (shapes, gdims, with_head) in instances {
            let channels: Vec<usize> = shapes.iter().map(|&(c, _, _)| c).collect();
            let gch = gdims.map(|(c, _, _)| c);
            let mut ps = ParamSet::new();
            decoder::init_params(&mut ps, "dec", &channels, gch, &mut rng);
            randomize_params(&mut ps, &mut rng);
            let mut data: Vec<(&str, Tensor)> = Vec::new();
            let names = ["level0", "level1", "level2"];
            for (i, &(c, h, w)) in shapes.iter().enumerate() {
                data.push((names[i], tensor(&mut rng, &[c, h, w], -2.0, 2.0)));
            }
            if let Some((c, h, w)) = gdims {
                data.push(("gmap", tensor(&mut rng, &[c, h, w], -2.0, 2.0)));
            }
            b.case("decode", ps, data, move |g, bp, d| {
                let (levels, gmap) = if gch.is_some() {
                    (&d[..d.len() - 1], Some(d[d.len() - 1]))
                } else {
                    (d, None)
                };
                let logits = decoder::decode(g, bp, "dec", levels, gmap)?;
                if with_head {
                    decoder::depth_head(
                        g,
                        logits,
                        DepthRange { d_min: 0.5, d_max: 4.0 },
                        5,
                        3,
                    )
                } else {
                    Ok(logits)
                }
            });
        }
    }

    b.cases
}

/// Run the composite-module suite; one report per case, in suite order.
pub fn run_modules(seed: u64, opts: &CheckOpts) -> Result<Vec<GradCheckReport>> {
    module_suite(seed)
        .into_iter()
        .map(|case| check_graph(&case.name, &case.inputs, case.build, opts))
        .collect()
}
