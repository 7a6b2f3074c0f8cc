//! Fractional sampling: the bilinear gather at arbitrary points that
//! deformable attention is built on, and the weighted reduction that
//! folds per-point samples back into per-query features.

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

/// One bilinear tap: neighbor indices, fractional weights.
struct Taps {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

fn taps(x: f64, y: f64) -> Taps {
    // Coordinates far outside any real map (including overflow from a
    // diverging run) must still index safely; everything past the map
    // edge contributes zero anyway, and NaN weights keep propagating.
    let x0 = x.clamp(-1e15, 1e15).floor();
    let y0 = y.clamp(-1e15, 1e15).floor();
    Taps {
        x0: x0 as isize,
        y0: y0 as isize,
        wx: x - x0,
        wy: y - y0,
    }
}

/// Sample a map [C,H,W] at P fractional points (points [P,2], columns
/// (x,y) in pixel units, origin at the center of pixel (0,0)) → [C,P].
///
/// Out-of-bounds neighbors contribute zero. Differentiable in both the
/// map values and the point coordinates.
#[derive(Clone)]
pub struct BilinearSample;

impl DiffOp for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (map, pts) = (inputs[0], inputs[1]);
        if map.rank() != 3 || pts.rank() != 2 || pts.shape()[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: map.shape().to_vec(),
                rhs: pts.shape().to_vec(),
            });
        }
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let p = pts.shape()[0];
        let mut out = vec![0.0; c * p];
        for pi in 0..p {
            let t = taps(pts.data()[pi * 2], pts.data()[pi * 2 + 1]);
            for (dy, dx, wgt) in [
                (0, 0, (1.0 - t.wy) * (1.0 - t.wx)),
                (0, 1, (1.0 - t.wy) * t.wx),
                (1, 0, t.wy * (1.0 - t.wx)),
                (1, 1, t.wy * t.wx),
            ] {
                let (yy, xx) = (t.y0 + dy, t.x0 + dx);
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    continue;
                }
                let base = (yy as usize) * w + xx as usize;
                for ch in 0..c {
                    out[ch * p + pi] += wgt * map.data()[ch * h * w + base];
                }
            }
        }
        Tensor::new(vec![c, p], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (map, pts) = (inputs[0], inputs[1]);
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let p = pts.shape()[0];
        let mut dmap = vec![0.0; map.numel()];
        let mut dpts = vec![0.0; pts.numel()];
        for pi in 0..p {
            let t = taps(pts.data()[pi * 2], pts.data()[pi * 2 + 1]);
            let fetch = |dy: isize, dx: isize, ch: usize| -> f64 {
                let (yy, xx) = (t.y0 + dy, t.x0 + dx);
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    0.0
                } else {
                    map.data()[ch * h * w + (yy as usize) * w + xx as usize]
                }
            };
            for ch in 0..c {
                let gv = grad.data()[ch * p + pi];
                if gv == 0.0 {
                    continue;
                }
                let m00 = fetch(0, 0, ch);
                let m01 = fetch(0, 1, ch);
                let m10 = fetch(1, 0, ch);
                let m11 = fetch(1, 1, ch);
                dpts[pi * 2] += gv * ((1.0 - t.wy) * (m01 - m00) + t.wy * (m11 - m10));
                dpts[pi * 2 + 1] += gv * ((1.0 - t.wx) * (m10 - m00) + t.wx * (m11 - m01));
                for (dy, dx, wgt) in [
                    (0, 0, (1.0 - t.wy) * (1.0 - t.wx)),
                    (0, 1, (1.0 - t.wy) * t.wx),
                    (1, 0, t.wy * (1.0 - t.wx)),
                    (1, 1, t.wy * t.wx),
                ] {
                    let (yy, xx) = (t.y0 + dy, t.x0 + dx);
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    dmap[ch * h * w + (yy as usize) * w + xx as usize] += gv * wgt;
                }
            }
        }
        vec![
            Tensor::new(map.shape().to_vec(), dmap).unwrap(),
            Tensor::new(pts.shape().to_vec(), dpts).unwrap(),
        ]
    }
}

/// Weighted reduction over groups of k sample columns:
/// out[q,c] = Σ_j w[q,j] · s[c, q·k + j], for w [Q,k], s [C, Q·k] → [Q,C].
///
/// Pairs with [`BilinearSample`]: sample k points per query, then blend
/// them with the attention weights.
#[derive(Clone)]
pub struct WeightedPointSum {
    pub k: usize,
}

impl DiffOp for WeightedPointSum {
    fn name(&self) -> &'static str {
        "weighted_point_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (wt, s) = (inputs[0], inputs[1]);
        if wt.rank() != 2
            || s.rank() != 2
            || wt.shape()[1] != self.k
            || s.shape()[1] != wt.shape()[0] * self.k
        {
            return Err(Error::ShapeMismatch {
                op: "weighted_point_sum",
                lhs: wt.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (q, c) = (wt.shape()[0], s.shape()[0]);
        let cols = s.shape()[1];
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..self.k {
                    acc += wt.data()[qi * self.k + j] * s.data()[ch * cols + qi * self.k + j];
                }
                out[qi * c + ch] = acc;
            }
        }
        Tensor::new(vec![q, c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (wt, s) = (inputs[0], inputs[1]);
        let (q, c) = (wt.shape()[0], s.shape()[0]);
        let cols = s.shape()[1];
        let mut dw = vec![0.0; wt.numel()];
        let mut ds = vec![0.0; s.numel()];
        for qi in 0..q {
            for ch in 0..c {
                let gv = grad.data()[qi * c + ch];
                for j in 0..self.k {
                    dw[qi * self.k + j] += gv * s.data()[ch * cols + qi * self.k + j];
                    ds[ch * cols + qi * self.k + j] += gv * wt.data()[qi * self.k + j];
                }
            }
        }
        vec![
            Tensor::new(wt.shape().to_vec(), dw).unwrap(),
            Tensor::new(s.shape().to_vec(), ds).unwrap(),
        ]
    }
}
