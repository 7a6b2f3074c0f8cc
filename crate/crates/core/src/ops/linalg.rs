//! Matrix products, row/column affines, softmax and layer normalization.
//!
//! Row matrices are [N, C]: one row per token/pixel, one column per
//! channel. Linear layers are `x · W` with W stored [in, out].

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

/// c = a·b for a [m,k], b [k,n].
pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], c).unwrap()
}

/// a·bᵀ for a [m,c], b [n,c].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, c) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], c);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * c..(i + 1) * c];
        for j in 0..n {
            let brow = &bd[j * c..(j + 1) * c];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// aᵀ·b for a [r,m], b [r,n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], r);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..r {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Matrix product [m,k]·[k,n] → [m,n].
#[derive(Clone)]
pub struct MatMul;

impl DiffOp for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(matmul_raw(a, b))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![matmul_nt(grad, inputs[1]), matmul_tn(inputs[0], grad)]
    }
}

/// 2-D transpose.
#[derive(Clone)]
pub struct Transpose2d;

impl DiffOp for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose2d expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![Transpose2d.forward(&[grad]).unwrap()]
    }
}

/// x [n,c] + bias [c], broadcast across rows.
#[derive(Clone)]
pub struct AddBiasRow;

impl DiffOp for AddBiasRow {
    fn name(&self) -> &'static str {
        "add_bias_row"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, b) = (inputs[0], inputs[1]);
        if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = b.shape()[0];
        Ok(Tensor::from_fn(x.shape(), |i| {
            x.data()[i] + b.data()[i % c]
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[1].shape()[0];
        let mut db = vec![0.0; c];
        for (i, gv) in grad.data().iter().enumerate() {
            db[i % c] += gv;
        }
        vec![grad.clone(), Tensor::new(vec![c], db).unwrap()]
    }
}

/// Per-column affine on a row matrix: out[i,j] = x[i,j]·gamma[j] + beta[j].
#[derive(Clone)]
pub struct ColumnAffine;

impl DiffOp for ColumnAffine {
    fn name(&self) -> &'static str {
        "column_affine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = *x.shape().last().unwrap();
        if x.rank() != 2 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "column_affine",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        Ok(Tensor::from_fn(x.shape(), |i| {
            x.data()[i] * gamma.data()[i % c] + beta.data()[i % c]
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.shape()[0];
        let dx = Tensor::from_fn(x.shape(), |i| grad.data()[i] * gamma.data()[i % c]);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, gv) in grad.data().iter().enumerate() {
            dgamma[i % c] += gv * x.data()[i];
            dbeta[i % c] += gv;
        }
        vec![
            dx,
            Tensor::new(vec![c], dgamma).unwrap(),
            Tensor::new(vec![c], dbeta).unwrap(),
        ]
    }
}

/// Softmax along one axis, computed with max-subtraction.
#[derive(Clone)]
pub struct Softmax {
    pub axis: usize,
}

impl Softmax {
    fn lines(&self, shape: &[usize]) -> (usize, usize, usize) {
        let n = shape[self.axis];
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        (outer, n, inner)
    }
}

impl DiffOp for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.axis >= x.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {} out of range for shape {:?}",
                self.axis,
                x.shape()
            )));
        }
        let (outer, n, inner) = self.lines(x.shape());
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| x.data()[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (x.data()[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[at(i)] /= sum;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (outer, n, inner) = self.lines(inputs[0].shape());
        let mut dx = vec![0.0; grad.numel()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let dot: f64 = (0..n)
                    .map(|i| grad.data()[at(i)] * output.data()[at(i)])
                    .sum();
                for i in 0..n {
                    dx[at(i)] = output.data()[at(i)] * (grad.data()[at(i)] - dot);
                }
            }
        }
        vec![Tensor::new(grad.shape().to_vec(), dx).unwrap()]
    }
}

/// Layer normalization over the last axis, with affine:
/// y = gamma·(x−μ)/√(σ²+eps) + beta, μ/σ² per row (biased variance).
#[derive(Clone)]
pub struct LayerNorm {
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn default_eps() -> Self {
        LayerNorm {
            eps: Self::DEFAULT_EPS,
        }
    }

    fn row_stats(&self, row: &[f64]) -> (f64, f64) {
        let c = row.len() as f64;
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        (mean, (var + self.eps).sqrt())
    }
}

impl DiffOp for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = *x.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; x.numel()];
        for (ri, row) in x.data().chunks(c).enumerate() {
            let (mean, sd) = self.row_stats(row);
            for j in 0..c {
                out[ri * c + j] = gamma.data()[j] * (row[j] - mean) / sd + beta.data()[j];
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.shape()[0];
        let cf = c as f64;
        let mut dx = vec![0.0; x.numel()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (ri, row) in x.data().chunks(c).enumerate() {
            let (mean, sd) = self.row_stats(row);
            let grow = &grad.data()[ri * c..(ri + 1) * c];
            // xhat = (x−μ)/σ; gh = dL/dxhat; then
            // dx = (gh − mean(gh) − xhat·mean(gh∘xhat)) / σ
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..c {
                let xhat = (row[j] - mean) / sd;
                let gh = grow[j] * gamma.data()[j];
                m1 += gh;
                m2 += gh * xhat;
                dgamma[j] += grow[j] * xhat;
                dbeta[j] += grow[j];
            }
            m1 /= cf;
            m2 /= cf;
            for j in 0..c {
                let xhat = (row[j] - mean) / sd;
                let gh = grow[j] * gamma.data()[j];
                dx[ri * c + j] = (gh - m1 - xhat * m2) / sd;
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx).unwrap(),
            Tensor::new(vec![c], dgamma).unwrap(),
            Tensor::new(vec![c], dbeta).unwrap(),
        ]
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
    fn matmul_hand_oracle() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.apply(MatMul, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::eye(3));
        let b = g.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = g.apply(MatMul, &[id, b]).unwrap();
        assert_eq!(g.value(c).data(), g.value(b).data());

        let z = g.leaf(Tensor::zeros(&[2, 2]));
        let any = g.leaf(t(vec![2, 2], vec![9.0, 8.0, 7.0, 6.0]));
        let zz = g.apply(MatMul, &[z, any]).unwrap();
        assert_eq!(g.value(zz).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 2]));
        let err = g.apply(MatMul, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn transposed_kernels_match_matmul() {
        let a = t(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let b = t(vec![3, 2], vec![2.0, 1.0, 0.0, -1.0, 5.0, 2.0]);
        let c = matmul_raw(&a, &b);
        let bt = Transpose2d.forward(&[&b]).unwrap();
        let at = Transpose2d.forward(&[&a]).unwrap();
        assert_eq!(matmul_nt(&a, &bt).data(), c.data());
        assert_eq!(matmul_tn(&at, &b).data(), c.data());
    }

    #[test]
    fn softmax_examples() {
        let sm = Softmax { axis: 0 };
        let y = sm.forward(&[&t(vec![3], vec![0.0, 0.0, 0.0])]).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let y = sm.forward(&[&t(vec![3], vec![1.0, 2.0, 3.0])]).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // shift invariance
        let y2 = sm
            .forward(&[&t(vec![3], vec![101.0, 102.0, 103.0])])
            .unwrap();
        assert!(y.max_abs_diff(&y2) < 1e-15);
    }

    #[test]
    fn softmax_rows_axis1() {
        let sm = Softmax { axis: 1 };
        let y = sm
            .forward(&[&t(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0])])
            .unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ln = LayerNorm::default_eps();
        let gamma = t(vec![3], vec![1.0, 1.0, 1.0]);
        let beta = t(vec![3], vec![0.0, 0.0, 0.0]);

        // constant row → zeros
        let y = ln
            .forward(&[&t(vec![1, 3], vec![4.0, 4.0, 4.0]), &gamma, &beta])
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        // [1,2,3] → ±sqrt(3/2) up to eps perturbation
        let y = ln
            .forward(&[&t(vec![1, 3], vec![1.0, 2.0, 3.0]), &gamma, &beta])
            .unwrap();
        assert!((y.data()[0] + 1.22474).abs() < 1e-4);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - 1.22474).abs() < 1e-4);

        // gamma = 0 collapses to beta
        let beta_b = t(vec![3], vec![7.0, 7.0, 7.0]);
        let zero = t(vec![3], vec![0.0, 0.0, 0.0]);
        let y = ln
            .forward(&[&t(vec![1, 3], vec![1.0, 5.0, 9.0]), &zero, &beta_b])
            .unwrap();
        assert_eq!(y.data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn bias_and_affine_broadcast() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(vec![2], vec![10.0, 20.0]));
        let y = g.apply(AddBiasRow, &[x, b]).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);

        let gamma = g.leaf(t(vec![2], vec![2.0, -1.0]));
        let beta = g.leaf(t(vec![2], vec![0.5, 0.0]));
        let z = g.apply(ColumnAffine, &[x, gamma, beta]).unwrap();
        assert_eq!(g.value(z).data(), &[2.5, -2.0, 6.5, -4.0]);
    }
}
