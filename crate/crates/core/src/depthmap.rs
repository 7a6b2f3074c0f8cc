//! Depth rasters with per-pixel validity masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w || valid.len() != h * w {
            return Err(Error::invalid(format!(
                "depth map {h}x{w} needs {} values and mask entries, got {} and {}",
                h * w,
                values.len(),
                valid.len()
            )));
        }
        Ok(DepthMap { h, w, values, valid })
    }

    /// Mask derived from the data: valid where finite and positive.
    pub fn from_positive(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        DepthMap::new(h, w, values, valid)
    }

    /// From a [H,W] or [1,H,W] tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            s => {
                return Err(Error::invalid(format!(
                    "depth map tensor must be [H,W] or [1,H,W], got {s:?}"
                )))
            }
        };
        DepthMap::from_positive(h, w, t.data().to_vec())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.w + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// [H,W] tensor with invalid pixels zeroed.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.h, self.w], |i| {
            if self.valid[i] {
                self.values[i]
            } else {
                0.0
            }
        })
    }
}
