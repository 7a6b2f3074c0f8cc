//! Multi-head, multi-level deformable attention.
//!
//! Each query predicts, per head and per pyramid level, K fractional
//! sampling locations (reference point plus learned offset, in pixel
//! units of that level) and a weight per location; the weights are
//! softmax-normalized over all levels and points of the head, the value
//! maps are sampled bilinearly, and the weighted sum per head is
//! concatenated and projected. The whole module is a composition of
//! generic graph ops and is differentiable in the queries, the values,
//! the reference points, and every parameter.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::ops;
use crate::params::{BoundParams, ParamSet};
use crate::pyramid::{LevelIndexMap, LevelShape};
use crate::tensor::Tensor;
use rand::Rng;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct DeformAttnConfig {
    pub heads: usize,
    /// Sampling points per head per level.
    pub points: usize,
}

impl DeformAttnConfig {
    pub fn desk_default() -> Self {
        DeformAttnConfig { heads: 8, points: 8 }
    }
}

/// The offset and weight heads start at zero, so an untrained module
/// averages the value features at the reference points uniformly over
/// levels and points; training then learns where to look.
pub fn init_params(
    ps: &mut ParamSet,
    prefix: &str,
    channels: usize,
    num_levels: usize,
    cfg: &DeformAttnConfig,
    rng: &mut impl Rng,
) {
    let mlk = cfg.heads * num_levels * cfg.points;
    nn::init_linear(ps, &format!("{prefix}.value"), channels, channels, INIT_STD, rng);
    nn::init_linear(ps, &format!("{prefix}.offset"), channels, 2 * mlk, 0.0, rng);
    nn::init_linear(ps, &format!("{prefix}.weight"), channels, mlk, 0.0, rng);
    nn::init_linear(ps, &format!("{prefix}.out"), channels, channels, INIT_STD, rng);
}

pub struct DeformAttnOutput {
    /// [Q, C] attended features.
    pub out: NodeId,
    /// [Q, M·L·K] normalized attention weights, columns (head, level,
    /// point)-major; each (query, head) group sums to 1.
    pub attn: NodeId,
}

/// Build deformable attention over flattened multi-level value rows.
///
/// `queries` [Q, C] drive the offset and weight heads; `refs` [Q, 2] are
/// normalized (x, y) reference points in [0,1]²; `value_rows`
/// [ΣHᵢWᵢ, C] hold the levels' features concatenated in `levels` order.
pub fn deform_attn(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    queries: NodeId,
    refs: NodeId,
    value_rows: NodeId,
    levels: &[LevelShape],
    cfg: &DeformAttnConfig,
) -> Result<DeformAttnOutput> {
    let (m, kp, l) = (cfg.heads, cfg.points, levels.len());
    if m == 0 || kp == 0 || l == 0 {
        return Err(Error::invalid("deform_attn: heads, points and levels must be positive"));
    }
    let qshape = g.value(queries).shape().to_vec();
    if qshape.len() != 2 {
        return Err(Error::invalid(format!(
            "deform_attn: queries must be [Q, C], got {qshape:?}"
        )));
    }
    let (q_count, c) = (qshape[0], qshape[1]);
    if c % m != 0 {
        return Err(Error::invalid(format!(
            "deform_attn: channels {c} not divisible by {m} heads"
        )));
    }
    let dh = c / m;
    if g.value(refs).shape() != [q_count, 2] {
        return Err(Error::ShapeMismatch {
            op: "deform_attn refs",
            lhs: g.value(refs).shape().to_vec(),
            rhs: vec![q_count, 2],
        });
    }
    if let Some(bad) = levels.iter().find(|ls| ls.c != c) {
        return Err(Error::invalid(format!(
            "deform_attn: level {bad:?} does not carry {c} channels"
        )));
    }
    let index_map = LevelIndexMap::new(levels.to_vec());
    if g.value(value_rows).shape() != [index_map.total_rows(), c] {
        return Err(Error::ShapeMismatch {
            op: "deform_attn values",
            lhs: g.value(value_rows).shape().to_vec(),
            rhs: vec![index_map.total_rows(), c],
        });
    }

    let values = nn::linear(g, bp, &format!("{prefix}.value"), value_rows)?;

    // per-(level, head) value grids [dh, H, W]
    let mut grids = Vec::with_capacity(l);
    for (li, ls) in levels.iter().enumerate() {
        let range = index_map.level_range(li);
        let lv = g.apply(
            ops::SliceRows { start: range.start, end: range.end },
            &[values],
        )?;
        let mut heads = Vec::with_capacity(m);
        for mi in 0..m {
            let hv = g.apply(
                ops::SliceCols { start: mi * dh, end: (mi + 1) * dh },
                &[lv],
            )?;
            heads.push(g.apply(ops::RowsToGrid { h: ls.h, w: ls.w }, &[hv])?);
        }
        grids.push(heads);
    }

    // per-level base points in pixel units, one row per (query, point)
    let repeat: Vec<usize> = (0..q_count).flat_map(|qi| std::iter::repeat(qi).take(kp)).collect();
    let mut base_points = Vec::with_capacity(l);
    for ls in levels {
        let gamma = g.leaf(Tensor::new(vec![2], vec![ls.w as f64, ls.h as f64])?);
        let beta = g.leaf(Tensor::new(vec![2], vec![-0.5, -0.5])?);
        let pixel = g.apply(ops::ColumnAffine, &[refs, gamma, beta])?;
        base_points.push(g.apply(ops::GatherRows(repeat.clone()), &[pixel])?);
    }

    let offsets = nn::linear(g, bp, &format!("{prefix}.offset"), queries)?;
    let raw = nn::linear(g, bp, &format!("{prefix}.weight"), queries)?;
    let grouped = g.apply(ops::Reshape(vec![q_count * m, l * kp]), &[raw])?;
    let soft = g.apply(ops::Softmax { axis: 1 }, &[grouped])?;
    let attn = g.apply(ops::Reshape(vec![q_count, m * l * kp]), &[soft])?;

    let mut head_outputs = Vec::with_capacity(m);
    for mi in 0..m {
        let mut acc: Option<NodeId> = None;
        for li in 0..l {
            let block = (mi * l + li) * kp;
            let off = g.apply(
                ops::SliceCols { start: 2 * block, end: 2 * (block + kp) },
                &[offsets],
            )?;
            let off = g.apply(ops::Reshape(vec![q_count * kp, 2]), &[off])?;
            let pts = g.apply(ops::Add, &[base_points[li], off])?;
            let sampled = g.apply(ops::BilinearSample, &[grids[li][mi], pts])?;
            let w = g.apply(ops::SliceCols { start: block, end: block + kp }, &[attn])?;
            let contrib = g.apply(ops::WeightedPointSum { k: kp }, &[w, sampled])?;
            acc = Some(match acc {
                Some(a) => g.apply(ops::Add, &[a, contrib])?,
                None => contrib,
            });
        }
        head_outputs.push(acc.expect("at least one level"));
    }
    let merged = g.apply(ops::ConcatCols, &head_outputs)?;
    let out = nn::linear(g, bp, &format!("{prefix}.out"), merged)?;
    Ok(DeformAttnOutput { out, attn })
}

/// One normalized reference point per flattened token: the token's own
/// pixel center ((x+0.5)/W, (y+0.5)/H) at its level. Used by the
/// self-attention variant, where every token queries the pyramid around
/// its own location.
pub fn grid_reference_points(levels: &[LevelShape]) -> Tensor {
    let total: usize = levels.iter().map(|ls| ls.h * ls.w).sum();
    let mut data = Vec::with_capacity(total * 2);
    for ls in levels {
        for y in 0..ls.h {
            for x in 0..ls.w {
                data.push((x as f64 + 0.5) / ls.w as f64);
                data.push((y as f64 + 0.5) / ls.h as f64);
            }
        }
    }
    Tensor::new(vec![total, 2], data).expect("nonempty levels")
}

/// Plain-loop reference evaluation of the same module: an independent
/// implementation the test suites compare the graph version against.
pub fn deform_attn_reference(
    ps: &ParamSet,
    prefix: &str,
    queries: &Tensor,
    refs: &Tensor,
    value_rows: &Tensor,
    levels: &[LevelShape],
    cfg: &DeformAttnConfig,
) -> Result<Tensor> {
    let (m, kp, l) = (cfg.heads, cfg.points, levels.len());
    let (q_count, c) = (queries.shape()[0], queries.shape()[1]);
    let dh = c / m;
    let lk = l * kp;

    let get = |name: &str| {
        ps.get(&format!("{prefix}.{name}"))
            .unwrap_or_else(|| panic!("missing parameter {prefix}.{name}"))
    };
    let lin = |w: &Tensor, b: &Tensor, x: &Tensor| -> Tensor {
        let (n, ci, co) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; n * co];
        for i in 0..n {
            for k in 0..ci {
                let xv = x.data()[i * ci + k];
                for j in 0..co {
                    out[i * co + j] += xv * w.data()[k * co + j];
                }
            }
            for j in 0..co {
                out[i * co + j] += b.data()[j];
            }
        }
        Tensor::new(vec![n, co], out).expect("linear shape")
    };

    let values = lin(get("value.w"), get("value.b"), value_rows);
    let offsets = lin(get("offset.w"), get("offset.b"), queries);
    let raw = lin(get("weight.w"), get("weight.b"), queries);

    let mut attn = vec![0.0; q_count * m * lk];
    for base in (0..attn.len()).step_by(lk) {
        let row = &raw.data()[base..base + lk];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            attn[base + j] = e;
            z += e;
        }
        for j in 0..lk {
            attn[base + j] /= z;
        }
    }

    let mut starts = vec![0usize; l];
    for li in 1..l {
        starts[li] = starts[li - 1] + levels[li - 1].h * levels[li - 1].w;
    }
    let sample = |li: usize, mi: usize, d: usize, x: f64, y: f64| -> f64 {
        let ls = &levels[li];
        let (fx, fy) = (x - x.floor(), y - y.floor());
        let (x0, y0) = (x.floor() as isize, y.floor() as isize);
        let fetch = |xi: isize, yi: isize| -> f64 {
            if xi < 0 || yi < 0 || xi >= ls.w as isize || yi >= ls.h as isize {
                return 0.0;
            }
            let row = starts[li] + yi as usize * ls.w + xi as usize;
            values.data()[row * c + mi * dh + d]
        };
        let taps = [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ];
        taps.iter()
            .map(|&(dy, dx, wgt)| wgt * fetch(x0 + dx, y0 + dy))
            .sum()
    };

    let mut merged = vec![0.0; q_count * c];
    for qi in 0..q_count {
        for mi in 0..m {
            for li in 0..l {
                let ls = &levels[li];
                for ki in 0..kp {
                    let col = (mi * l + li) * kp + ki;
                    let a = attn[(qi * m + mi) * lk + li * kp + ki];
                    let ox = offsets.data()[qi * 2 * m * lk + 2 * col];
                    let oy = offsets.data()[qi * 2 * m * lk + 2 * col + 1];
                    let px = refs.at(&[qi, 0]) * ls.w as f64 - 0.5 + ox;
                    let py = refs.at(&[qi, 1]) * ls.h as f64 - 0.5 + oy;
                    for d in 0..dh {
                        merged[qi * c + mi * dh + d] += a * sample(li, mi, d, px, py);
                    }
                }
            }
        }
    }
    let merged = Tensor::new(vec![q_count, c], merged).expect("merged shape");
    Ok(lin(get("out.w"), get("out.b"), &merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph, CheckOpts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_levels() -> Vec<LevelShape> {
        vec![
            LevelShape { c: 4, h: 3, w: 3 },
            LevelShape { c: 4, h: 2, w: 2 },
        ]
    }

    fn identity_linear(ps: &mut ParamSet, prefix: &str, c: usize) {
        ps.add(format!("{prefix}.w"), Tensor::eye(c));
        ps.add(format!("{prefix}.b"), Tensor::zeros(&[c]));
    }

    #[test]
    fn zero_init_averages_reference_features() {
        // identity projections, zero offset/weight heads, one level:
        // every token's output is its own feature vector.
        let cfg = DeformAttnConfig { heads: 2, points: 4 };
        let levels = vec![LevelShape { c: 4, h: 2, w: 2 }];
        let mut ps = ParamSet::new();
        identity_linear(&mut ps, "da.value", 4);
        ps.add("da.offset.w", Tensor::zeros(&[4, 2 * 2 * 1 * 4]));
        ps.add("da.offset.b", Tensor::zeros(&[2 * 2 * 1 * 4]));
        ps.add("da.weight.w", Tensor::zeros(&[4, 2 * 1 * 4]));
        ps.add("da.weight.b", Tensor::zeros(&[2 * 1 * 4]));
        identity_linear(&mut ps, "da.out", 4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = Tensor::rand_normal(&[4, 4], 1.0, &mut rng);
        let refs = grid_reference_points(&levels);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let (q, r, v) = (g.leaf(rows.clone()), g.leaf(refs), g.leaf(rows.clone()));
        let out = deform_attn(&mut g, &bp, "da", q, r, v, &levels, &cfg).unwrap();
        assert!(g.value(out.out).max_abs_diff(&rows) < 1e-14);

        // uniform weights at zero init
        for &a in g.value(out.attn).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_loop_reference() {
        let cfg = DeformAttnConfig { heads: 2, points: 3 };
        let levels = small_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "da", 4, levels.len(), &cfg, &mut rng);
        // move the heads off zero so points land at fractional spots
        for (name, t) in ps.iter_mut() {
            if name.contains(".offset.") || name.contains(".weight.") {
                *t = Tensor::rand_normal(t.shape(), 0.7, &mut rng);
            }
        }
        let queries = Tensor::rand_normal(&[5, 4], 1.0, &mut rng);
        let refs = Tensor::rand_uniform(&[5, 2], 0.0, 1.0, &mut rng);
        let rows = Tensor::rand_normal(&[13, 4], 1.0, &mut rng);

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let (q, r, v) = (g.leaf(queries.clone()), g.leaf(refs.clone()), g.leaf(rows.clone()));
        let out = deform_attn(&mut g, &bp, "da", q, r, v, &levels, &cfg).unwrap();

        let want = deform_attn_reference(&ps, "da", &queries, &refs, &rows, &levels, &cfg).unwrap();
        assert!(g.value(out.out).max_abs_diff(&want) < 1e-12);

        // normalized weights sum to 1 per (query, head)
        let attn = g.value(out.attn);
        let lk = levels.len() * cfg.points;
        for group in attn.data().chunks(lk) {
            let s: f64 = group.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_full_module() {
        let cfg = DeformAttnConfig { heads: 2, points: 2 };
        let levels = small_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "da", 4, levels.len(), &cfg, &mut rng);
        for (name, t) in ps.iter_mut() {
            if name.contains(".offset.") || name.contains(".weight.") {
                *t = Tensor::rand_normal(t.shape(), 0.5, &mut rng);
            }
        }
        let mut inputs: Vec<(String, Tensor)> =
            ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let n_params = inputs.len();
        inputs.push(("queries".into(), Tensor::rand_normal(&[3, 4], 1.0, &mut rng)));
        inputs.push(("refs".into(), Tensor::rand_uniform(&[3, 2], 0.15, 0.85, &mut rng)));
        inputs.push(("rows".into(), Tensor::rand_normal(&[13, 4], 1.0, &mut rng)));

        let levels2 = levels.clone();
        let ps_ref = &ps;
        let report = check_graph(
            "deform_attn",
            &inputs,
            move |g, ids| {
                let bp = BoundParams::from_ids(ps_ref, ids[..n_params].to_vec());
                let out = deform_attn(
                    g,
                    &bp,
                    "da",
                    ids[n_params],
                    ids[n_params + 1],
                    ids[n_params + 2],
                    &levels2,
                    &cfg,
                )?;
                g.apply(ops::SumAll, &[out.out])
            },
            &CheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn rejects_bad_wiring() {
        let cfg = DeformAttnConfig { heads: 3, points: 2 };
        let levels = small_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        init_params(&mut ps, "da", 4, levels.len(), &cfg, &mut rng);
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &ps);
        let q = g.leaf(Tensor::zeros(&[3, 4]));
        let r = g.leaf(Tensor::zeros(&[3, 2]));
        let v = g.leaf(Tensor::zeros(&[13, 4]));
        // 4 channels, 3 heads
        assert!(deform_attn(&mut g, &bp, "da", q, r, v, &levels, &cfg).is_err());

        let cfg = DeformAttnConfig { heads: 2, points: 2 };
        let bad_rows = g.leaf(Tensor::zeros(&[12, 4]));
        assert!(deform_attn(&mut g, &bp, "da", q, r, bad_rows, &levels, &cfg).is_err());
    }
}
