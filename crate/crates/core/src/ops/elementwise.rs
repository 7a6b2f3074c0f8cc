//! Elementwise maps and full reductions.

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
#[derive(Clone)]
pub struct Add;

impl DiffOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_same_shape("add", inputs[0], inputs[1])?;
        let data = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(inputs[0].shape().to_vec(), data)
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.clone(), grad.clone()]
    }
}

/// Elementwise (Hadamard) product.
#[derive(Clone)]
pub struct Mul;

impl DiffOp for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_same_shape("mul", inputs[0], inputs[1])?;
        let data = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(inputs[0].shape().to_vec(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let da = Tensor::from_fn(grad.shape(), |i| grad.data()[i] * inputs[1].data()[i]);
        let db = Tensor::from_fn(grad.shape(), |i| grad.data()[i] * inputs[0].data()[i]);
        vec![da, db]
    }
}

/// Multiplication by a fixed scalar.
#[derive(Clone)]
pub struct Scale(pub f64);

impl DiffOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * self.0))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.map(|v| v * self.0)]
    }
}

/// Addition of a fixed scalar.
#[derive(Clone)]
pub struct AddScalar(pub f64);

impl DiffOp for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v + self.0))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.clone()]
    }
}

/// Logistic sigmoid 1/(1+e^-x).
#[derive(Clone)]
pub struct Sigmoid;

impl DiffOp for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let dx = Tensor::from_fn(grad.shape(), |i| {
            let y = output.data()[i];
            grad.data()[i] * y * (1.0 - y)
        });
        vec![dx]
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Smooth GELU (tanh form): 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³))).
///
/// Used as the only nonlinearity in the network; being smooth it keeps
/// central-difference gradient checks clean where ReLU's kink would not.
#[derive(Clone)]
pub struct Gelu;

impl DiffOp for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let dx = Tensor::from_fn(grad.shape(), |i| {
            let x = inputs[0].data()[i];
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            grad.data()[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        });
        vec![dx]
    }
}

/// Sum of all entries, producing a scalar.
#[derive(Clone)]
pub struct SumAll;

impl DiffOp for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![Tensor::full(inputs[0].shape(), grad.item())]
    }
}

/// Mean of all entries, producing a scalar.
#[derive(Clone)]
pub struct MeanAll;

impl DiffOp for MeanAll {
    fn name(&self) -> &'static str {
        "mean_all"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let n = inputs[0].numel() as f64;
        Ok(Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = inputs[0].numel() as f64;
        vec![Tensor::full(inputs[0].shape(), grad.item() / n)]
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
    fn add_and_mul() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(t(vec![2], vec![10.0, 20.0]));
        let s = g.apply(Add, &[a, b]).unwrap();
        let p = g.apply(Mul, &[a, b]).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0]);
        assert_eq!(g.value(p).data(), &[10.0, 40.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(t(vec![3], vec![1.0, 2.0, 3.0]));
        let err = g.apply(Add, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![3], vec![0.0, 40.0, -40.0]));
        let y = g.apply(Sigmoid, &[x]).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-6);
        assert!(d[2] < 1e-6);
    }

    #[test]
    fn gelu_known_values() {
        // gelu(0) = 0; gelu is odd-symmetric around the origin only
        // approximately, but large positive inputs pass through.
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2], vec![0.0, 10.0]));
        let y = g.apply(Gelu, &[x]).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = g.apply(SumAll, &[x]).unwrap();
        let m = g.apply(MeanAll, &[x]).unwrap();
        assert_eq!(g.value(s).item(), 10.0);
        assert_eq!(g.value(m).item(), 2.5);
        let grads = g.backward(m, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt(x, &g).data(), &[0.25; 4]);
    }
}
