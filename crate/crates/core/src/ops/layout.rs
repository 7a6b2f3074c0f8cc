//! Data-movement ops: reshapes, gathers, slices, concatenations, and the
//! grid↔row conversions that let attention code work on [N, C] matrices
//! while convolutions work on [C, H, W] grids.
//!
//! All of these are linear with 0/1 coefficients, so each backward pass
//! is the corresponding scatter.

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

fn expect_rank2(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!(
            "{op} expects a rank-2 tensor, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn expect_rank3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::invalid(format!(
            "{op} expects a rank-3 tensor, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Same data, new shape.
#[derive(Clone)]
pub struct Reshape(pub Vec<usize>);

impl DiffOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].reshaped(&self.0)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.reshaped(inputs[0].shape()).unwrap()]
    }
}

/// Row gather: out[i] = x[indices[i]]. Indices may repeat, so this also
/// expresses row repetition and per-level broadcast; the backward pass
/// scatter-adds.
#[derive(Clone)]
pub struct GatherRows(pub Vec<usize>);

impl DiffOp for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c) = expect_rank2("gather_rows", inputs[0])?;
        if let Some(&bad) = self.0.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(self.0.len() * c);
        for &i in &self.0 {
            out.extend_from_slice(&inputs[0].data()[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![self.0.len(), c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[0].shape()[1];
        let mut dx = Tensor::zeros_like(inputs[0]);
        for (row, &i) in self.0.iter().enumerate() {
            let src = &grad.data()[row * c..(row + 1) * c];
            let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![dx]
    }
}

/// Contiguous row slice [start, end).
#[derive(Clone)]
pub struct SliceRows {
    pub start: usize,
    pub end: usize,
}

impl DiffOp for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c) = expect_rank2("slice_rows", inputs[0])?;
        if self.start >= self.end || self.end > n {
            return Err(Error::invalid(format!(
                "slice_rows {}..{} invalid for {n} rows",
                self.start, self.end
            )));
        }
        Tensor::new(
            vec![self.end - self.start, c],
            inputs[0].data()[self.start * c..self.end * c].to_vec(),
        )
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[0].shape()[1];
        let mut dx = Tensor::zeros_like(inputs[0]);
        dx.data_mut()[self.start * c..self.end * c].copy_from_slice(grad.data());
        vec![dx]
    }
}

/// Contiguous column slice [start, end).
#[derive(Clone)]
pub struct SliceCols {
    pub start: usize,
    pub end: usize,
}

impl DiffOp for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c) = expect_rank2("slice_cols", inputs[0])?;
        if self.start >= self.end || self.end > c {
            return Err(Error::invalid(format!(
                "slice_cols {}..{} invalid for {c} columns",
                self.start, self.end
            )));
        }
        let w = self.end - self.start;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&inputs[0].data()[i * c + self.start..i * c + self.end]);
        }
        Tensor::new(vec![n, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (n, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let w = self.end - self.start;
        let mut dx = Tensor::zeros_like(inputs[0]);
        for i in 0..n {
            dx.data_mut()[i * c + self.start..i * c + self.end]
                .copy_from_slice(&grad.data()[i * w..(i + 1) * w]);
        }
        vec![dx]
    }
}

/// Stack row matrices vertically; all inputs share the column count.
#[derive(Clone)]
pub struct ConcatRows;

impl DiffOp for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (_, c) = expect_rank2("concat_rows", inputs[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for x in inputs {
            let (ni, ci) = expect_rank2("concat_rows", x)?;
            if ci != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            rows += ni;
            out.extend_from_slice(x.data());
        }
        Tensor::new(vec![rows, c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut grads = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for x in inputs {
            let len = x.numel();
            grads.push(
                Tensor::new(x.shape().to_vec(), grad.data()[off..off + len].to_vec()).unwrap(),
            );
            off += len;
        }
        grads
    }
}

/// Stack row matrices side by side; all inputs share the row count.
#[derive(Clone)]
pub struct ConcatCols;

impl DiffOp for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, _) = expect_rank2("concat_cols", inputs[0])?;
        let mut total_c = 0;
        for x in inputs {
            let (ni, ci) = expect_rank2("concat_cols", x)?;
            if ni != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            total_c += ci;
        }
        let mut out = Vec::with_capacity(n * total_c);
        for i in 0..n {
            for x in inputs {
                let ci = x.shape()[1];
                out.extend_from_slice(&x.data()[i * ci..(i + 1) * ci]);
            }
        }
        Tensor::new(vec![n, total_c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = inputs[0].shape()[0];
        let total_c = grad.shape()[1];
        let mut grads: Vec<Tensor> = inputs.iter().map(|x| Tensor::zeros_like(x)).collect();
        for i in 0..n {
            let mut off = 0;
            for (x, dx) in inputs.iter().zip(grads.iter_mut()) {
                let ci = x.shape()[1];
                dx.data_mut()[i * ci..(i + 1) * ci]
                    .copy_from_slice(&grad.data()[i * total_c + off..i * total_c + off + ci]);
                off += ci;
            }
        }
        grads
    }
}

/// [C,H,W] grid → [H·W, C] rows, pixels in row-major order.
#[derive(Clone)]
pub struct GridToRows;

impl DiffOp for GridToRows {
    fn name(&self) -> &'static str {
        "grid_to_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("grid_to_rows", inputs[0])?;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = inputs[0].data()[ch * h * w + p];
            }
        }
        Tensor::new(vec![h * w, c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (c, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
        );
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                dx[ch * h * w + p] = grad.data()[p * c + ch];
            }
        }
        vec![Tensor::new(vec![c, h, w], dx).unwrap()]
    }
}

/// [h·w, C] rows → [C, h, w] grid; inverse of [`GridToRows`].
#[derive(Clone)]
pub struct RowsToGrid {
    pub h: usize,
    pub w: usize,
}

impl DiffOp for RowsToGrid {
    fn name(&self) -> &'static str {
        "rows_to_grid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c) = expect_rank2("rows_to_grid", inputs[0])?;
        if n != self.h * self.w {
            return Err(Error::invalid(format!(
                "rows_to_grid: {n} rows cannot fill a {}x{} grid",
                self.h, self.w
            )));
        }
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = inputs[0].data()[p * c + ch];
            }
        }
        Tensor::new(vec![c, self.h, self.w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (n, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let mut dx = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                dx[p * c + ch] = grad.data()[ch * n + p];
            }
        }
        vec![Tensor::new(vec![n, c], dx).unwrap()]
    }
}

/// Concatenate grids along the channel axis; spatial extents must match.
#[derive(Clone)]
pub struct ConcatChannels;

impl DiffOp for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (_, h, w) = expect_rank3("concat_channels", inputs[0])?;
        let mut channels = 0;
        let mut out = Vec::new();
        for x in inputs {
            let (ci, hi, wi) = expect_rank3("concat_channels", x)?;
            if (hi, wi) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            channels += ci;
            out.extend_from_slice(x.data());
        }
        Tensor::new(vec![channels, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut grads = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for x in inputs {
            let len = x.numel();
            grads.push(
                Tensor::new(x.shape().to_vec(), grad.data()[off..off + len].to_vec()).unwrap(),
            );
            off += len;
        }
        grads
    }
}

/// Cut an image [C,H,W] into non-overlapping p×p patches and emit one row
/// per patch: the concatenation of its pixel values, pixel-major
/// ((dy,dx) raster order, channels fastest). Output [(H/p)(W/p), C·p·p].
#[derive(Clone)]
pub struct PatchExtract {
    pub p: usize,
}

impl DiffOp for PatchExtract {
    fn name(&self) -> &'static str {
        "patch_extract"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("patch_extract", inputs[0])?;
        let p = self.p;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "patch_extract: image {h}x{w} not divisible into {p}x{p} patches"
            )));
        }
        let (hp, wp) = (h / p, w / p);
        let row_len = c * p * p;
        let mut out = vec![0.0; hp * wp * row_len];
        for py in 0..hp {
            for px in 0..wp {
                let row = py * wp + px;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[row * row_len + (dy * p + dx) * c + ch] =
                                inputs[0].data()[(ch * h + py * p + dy) * w + px * p + dx];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![hp * wp, row_len], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (c, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
        );
        let p = self.p;
        let (hp, wp) = (h / p, w / p);
        let row_len = c * p * p;
        let mut dx = vec![0.0; c * h * w];
        for py in 0..hp {
            for px in 0..wp {
                let row = py * wp + px;
                for dy in 0..p {
                    for dx_ in 0..p {
                        for ch in 0..c {
                            dx[(ch * h + py * p + dy) * w + px * p + dx_] =
                                grad.data()[row * row_len + (dy * p + dx_) * c + ch];
                        }
                    }
                }
            }
        }
        vec![Tensor::new(vec![c, h, w], dx).unwrap()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn gather_and_scatter() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.apply(GatherRows(vec![2, 0, 2]), &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.apply(crate::ops::SumAll, &[y]).unwrap();
        let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
        // row 2 used twice, row 1 never
        assert_eq!(grads.wrt(x, &g).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slices() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = g.apply(SliceRows { start: 1, end: 2 }, &[x]).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 5.0, 6.0]);
        let c = g.apply(SliceCols { start: 1, end: 3 }, &[x]).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_inverts_slices() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let b = g.leaf(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let rows = g.apply(ConcatRows, &[a, b]).unwrap();
        assert_eq!(g.value(rows).shape(), &[3, 2]);
        assert_eq!(g.value(rows).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = g.leaf(t(vec![2, 1], vec![9.0, 10.0]));
        let cols = g.apply(ConcatCols, &[b, c]).unwrap();
        assert_eq!(g.value(cols).data(), &[3.0, 4.0, 9.0, 5.0, 6.0, 10.0]);
    }

    #[test]
    fn grid_row_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()));
        let rows = g.apply(GridToRows, &[x]).unwrap();
        assert_eq!(g.value(rows).shape(), &[6, 2]);
        // pixel (0,0) carries channels (0, 6)
        assert_eq!(g.value(rows).data()[0..2], [0.0, 6.0]);
        let back = g.apply(RowsToGrid { h: 2, w: 3 }, &[rows]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn patch_extract_layout() {
        // 1-channel 2x2 image, p=2: single row with raster pixel order.
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let rows = g.apply(PatchExtract { p: 2 }, &[x]).unwrap();
        assert_eq!(g.value(rows).shape(), &[1, 4]);
        assert_eq!(g.value(rows).data(), &[1.0, 2.0, 3.0, 4.0]);

        // locality: p=1 keeps channels per pixel
        let y = g.leaf(t(vec![2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]));
        let rows = g.apply(PatchExtract { p: 1 }, &[y]).unwrap();
        assert_eq!(g.value(rows).shape(), &[2, 2]);
        assert_eq!(g.value(rows).data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn patch_extract_rejects_indivisible() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(g.apply(PatchExtract { p: 2 }, &[x]).is_err());
    }
}
