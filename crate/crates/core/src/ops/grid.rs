//! Ops on [C, H, W] grids: convolution, per-channel bias/affine, and the
//! two upsamplers used by the decoder and the evaluation protocol.

use crate::error::{Error, Result};
use crate::graph::DiffOp;
use crate::tensor::Tensor;

fn expect_rank3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::invalid(format!(
            "{op} expects a rank-3 tensor, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// 2-D convolution with zero padding.
/// Inputs: x [Cin,H,W], kernel [Cout,Cin,kh,kw].
#[derive(Clone)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if k > padded || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

impl DiffOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (cin, h, w) = expect_rank3("conv2d", inputs[0])?;
        let k = inputs[1];
        if k.rank() != 4 || k.shape()[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: inputs[0].shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = match (self.out_extent(h, kh), self.out_extent(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(format!(
                    "conv2d: kernel {kh}x{kw} stride {} pad {} does not fit input {h}x{w}",
                    self.stride, self.pad
                )))
            }
        };
        let (xd, kd) = (inputs[0].data(), k.data());
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[(ci * h + iy as usize) * w + ix as usize]
                                    * kd[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (cin, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
        );
        let k = inputs[1];
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = (output.shape()[1], output.shape()[2]);
        let (xd, kd) = (inputs[0].data(), k.data());
        let mut dx = vec![0.0; cin * h * w];
        let mut dk = vec![0.0; k.numel()];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = grad.data()[(co * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = (ci * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                dx[xi] += gv * kd[ki];
                                dk[ki] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
        vec![
            Tensor::new(vec![cin, h, w], dx).unwrap(),
            Tensor::new(k.shape().to_vec(), dk).unwrap(),
        ]
    }
}

/// x [C,H,W] + bias [C], broadcast over positions.
#[derive(Clone)]
pub struct AddChannelBias;

impl DiffOp for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("add_channel_bias", inputs[0])?;
        if inputs[1].shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: inputs[0].shape().to_vec(),
                rhs: inputs[1].shape().to_vec(),
            });
        }
        let hw = h * w;
        Ok(Tensor::from_fn(inputs[0].shape(), |i| {
            inputs[0].data()[i] + inputs[1].data()[i / hw]
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[1].shape()[0];
        let hw = inputs[0].shape()[1] * inputs[0].shape()[2];
        let mut db = vec![0.0; c];
        for (i, gv) in grad.data().iter().enumerate() {
            db[i / hw] += gv;
        }
        vec![grad.clone(), Tensor::new(vec![c], db).unwrap()]
    }
}

/// Per-channel affine on a grid: out[c,h,w] = x[c,h,w]·gamma[c] + beta[c].
/// Stands in for batch norm: desk-scale batches of one or two make batch
/// statistics meaningless.
#[derive(Clone)]
pub struct ChannelAffine;

impl DiffOp for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("channel_affine", inputs[0])?;
        if inputs[1].shape() != [c] || inputs[2].shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: inputs[0].shape().to_vec(),
                rhs: inputs[1].shape().to_vec(),
            });
        }
        let hw = h * w;
        Ok(Tensor::from_fn(inputs[0].shape(), |i| {
            inputs[0].data()[i] * inputs[1].data()[i / hw] + inputs[2].data()[i / hw]
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[1].shape()[0];
        let hw = inputs[0].shape()[1] * inputs[0].shape()[2];
        let dx = Tensor::from_fn(inputs[0].shape(), |i| {
            grad.data()[i] * inputs[1].data()[i / hw]
        });
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, gv) in grad.data().iter().enumerate() {
            dgamma[i / hw] += gv * inputs[0].data()[i];
            dbeta[i / hw] += gv;
        }
        vec![
            dx,
            Tensor::new(vec![c], dgamma).unwrap(),
            Tensor::new(vec![c], dbeta).unwrap(),
        ]
    }
}

/// Nearest-neighbor 2× upsampling: [C,H,W] → [C,2H,2W].
#[derive(Clone)]
pub struct UpsampleNearest2x;

impl DiffOp for UpsampleNearest2x {
    fn name(&self) -> &'static str {
        "upsample_nearest_2x"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("upsample_nearest_2x", inputs[0])?;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] =
                        inputs[0].data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Tensor::new(vec![c, 2 * h, 2 * w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (c, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
        );
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dx[(ch * h + y / 2) * w + x / 2] += grad.data()[(ch * 2 * h + y) * 2 * w + x];
                }
            }
        }
        vec![Tensor::new(vec![c, h, w], dx).unwrap()]
    }
}

/// Source coordinate and blend weights for one output index under the
/// align-corners-false convention with edge clamping.
pub(crate) fn resize_taps(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of a grid to a fixed output extent
/// (align-corners-false, edge-clamped). Linear in the map values, so the
/// backward pass is the transposed scatter.
#[derive(Clone)]
pub struct BilinearResize {
    pub out_h: usize,
    pub out_w: usize,
}

impl DiffOp for BilinearResize {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, h, w) = expect_rank3("bilinear_resize", inputs[0])?;
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::invalid("bilinear_resize: zero output extent"));
        }
        let mut out = vec![0.0; c * self.out_h * self.out_w];
        for oy in 0..self.out_h {
            let (y0, y1, wy) = resize_taps(oy, self.out_h, h);
            for ox in 0..self.out_w {
                let (x0, x1, wx) = resize_taps(ox, self.out_w, w);
                for ch in 0..c {
                    let m = |y: usize, x: usize| inputs[0].data()[(ch * h + y) * w + x];
                    out[(ch * self.out_h + oy) * self.out_w + ox] = (1.0 - wy)
                        * ((1.0 - wx) * m(y0, x0) + wx * m(y0, x1))
                        + wy * ((1.0 - wx) * m(y1, x0) + wx * m(y1, x1));
                }
            }
        }
        Tensor::new(vec![c, self.out_h, self.out_w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (c, h, w) = (
            inputs[0].shape()[0],
            inputs[0].shape()[1],
            inputs[0].shape()[2],
        );
        let mut dx = vec![0.0; c * h * w];
        for oy in 0..self.out_h {
            let (y0, y1, wy) = resize_taps(oy, self.out_h, h);
            for ox in 0..self.out_w {
                let (x0, x1, wx) = resize_taps(ox, self.out_w, w);
                for ch in 0..c {
                    let gv = grad.data()[(ch * self.out_h + oy) * self.out_w + ox];
                    dx[(ch * h + y0) * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    dx[(ch * h + y0) * w + x1] += gv * (1.0 - wy) * wx;
                    dx[(ch * h + y1) * w + x0] += gv * wy * (1.0 - wx);
                    dx[(ch * h + y1) * w + x1] += gv * wy * wx;
                }
            }
        }
        vec![Tensor::new(vec![c, h, w], dx).unwrap()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernels() {
        let x = t(vec![1, 3, 3], (1..=9).map(|i| i as f64).collect());

        // 1x1 kernel of value 1
        let k1 = t(vec![1, 1, 1, 1], vec![1.0]);
        let y = Conv2d { stride: 1, pad: 0 }.forward(&[&x, &k1]).unwrap();
        assert_eq!(y.data(), x.data());

        // centered delta 3x3, pad 1
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k3 = t(vec![1, 1, 3, 3], kd);
        let y = Conv2d { stride: 1, pad: 1 }.forward(&[&x, &k3]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_strided_sum() {
        // ones 4x4, ones 2x2 kernel, stride 2 → 2x2 map of 4s
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = Conv2d { stride: 2, pad: 0 }.forward(&[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(Conv2d { stride: 1, pad: 0 }.forward(&[&x, &k]).is_err());
    }

    #[test]
    fn upsample_nearest() {
        let x = t(vec![1, 1, 2], vec![1.0, 2.0]);
        let y = UpsampleNearest2x.forward(&[&x]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn resize_1x2_to_1x4() {
        // [1,3] → [1, 1.5, 2.5, 3] under align-corners-false
        let x = t(vec![1, 1, 2], vec![1.0, 3.0]);
        let y = BilinearResize { out_h: 1, out_w: 4 }.forward(&[&x]).unwrap();
        let expect = [1.0, 1.5, 2.5, 3.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 2], 5.5);
        let y = BilinearResize { out_h: 7, out_w: 3 }.forward(&[&x]).unwrap();
        for v in y.data() {
            assert_eq!(*v, 5.5);
        }
    }

    #[test]
    fn channel_bias_and_affine() {
        let x = t(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2], vec![10.0, 20.0]);
        let y = AddChannelBias.forward(&[&x, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 23.0, 24.0]);

        let gamma = t(vec![2], vec![2.0, -1.0]);
        let beta = t(vec![2], vec![0.0, 1.0]);
        let y = ChannelAffine.forward(&[&x, &gamma, &beta]).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, -2.0, -3.0]);
    }
}
