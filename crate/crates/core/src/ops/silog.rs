//! Scale-invariant logarithmic loss over valid pixels.

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

/// SILog loss against a fixed ground truth:
///
///   h_i = log(pred_i) − log(gt_i) over valid pixels,
///   loss = alpha · sqrt( (1/T)·Σh² − (lambda/T²)·(Σh)² )
///
/// The radicand is clamped at 0 before the square root: the lambda·mean²
/// term can exceed the mean-square term by rounding alone. The ground
/// truth and its validity mask are captured in the op (they are data,
/// not differentiated); the single input is the prediction.
#[derive(Clone)]
pub struct SilogLoss {
    pub gt: Vec<f64>,
    pub valid: Vec<bool>,
    pub lambda: f64,
    pub alpha: f64,
}

impl SilogLoss {
    /// Gradient of the radicand is meaningless once it has collapsed to
    /// ~0 (perfect fit or clamp); below this the backward pass returns 0.
    const RADICAND_FLOOR: f64 = 1e-30;

    fn stats(&self, pred: &[f64]) -> Result<(f64, f64, usize)> {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut t = 0usize;
        for (i, (&p, &v)) in pred.iter().zip(&self.valid).enumerate() {
            if !v {
                continue;
            }
            if p <= 0.0 || self.gt[i] <= 0.0 {
                return Err(Error::invalid(format!(
                    "silog_loss: non-positive depth at valid pixel {i} (pred {p}, gt {})",
                    self.gt[i]
                )));
            }
            let h = p.ln() - self.gt[i].ln();
            s1 += h;
            s2 += h * h;
            t += 1;
        }
        if t == 0 {
            return Err(Error::invalid("silog_loss: no valid pixels"));
        }
        Ok((s1, s2, t))
    }
}

impl DiffOp for SilogLoss {
    fn name(&self) -> &'static str {
        "silog_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let pred = inputs[0];
        if pred.numel() != self.gt.len() || self.gt.len() != self.valid.len() {
            return Err(Error::ShapeMismatch {
                op: "silog_loss",
                lhs: pred.shape().to_vec(),
                rhs: vec![self.gt.len()],
            });
        }
        let (s1, s2, t) = self.stats(pred.data())?;
        let tf = t as f64;
        // clamp tiny negative rounding only; comparison keeps NaN as is
        // so a diverged prediction cannot masquerade as zero loss
        let mut radicand = s2 / tf - self.lambda * s1 * s1 / (tf * tf);
        if radicand < 0.0 {
            radicand = 0.0;
        }
        Ok(Tensor::scalar(self.alpha * radicand.sqrt()))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let pred = inputs[0];
        let (s1, _, t) = self.stats(pred.data()).expect("validated in forward");
        let tf = t as f64;
        let loss = output.item();
        let radicand = (loss / self.alpha) * (loss / self.alpha);
        let mut dx = vec![0.0; pred.numel()];
        if radicand > Self::RADICAND_FLOOR {
            // dL/dh_i = alpha/sqrt(rad) · (h_i/T − lambda·S/T²); then /pred_i
            let scale = grad.item() * self.alpha / radicand.sqrt();
            for (i, (&p, &v)) in pred.data().iter().zip(&self.valid).enumerate() {
                if !v {
                    continue;
                }
                let h = p.ln() - self.gt[i].ln();
                dx[i] = scale * (h / tf - self.lambda * s1 / (tf * tf)) / p;
            }
        }
        vec![Tensor::new(pred.shape().to_vec(), dx).unwrap()]
    }
}
