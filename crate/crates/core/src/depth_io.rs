//! Depth map and image serialization.
//!
//! Two depth formats, both with a one-line text header:
//!
//! * 16-bit raster: `DFD16 <W> <H> <scale>` + u16 little-endian values
//!   row-major. A value is depth·(1/scale) rounded; zero marks an
//!   invalid pixel, so at scale 1/256 the value 5120 reads as 20.0 m.
//! * plain text: `<H> <W>` + one row of floats per line; non-positive
//!   entries are invalid.
//!
//! Images go out as binary PPM (P6), 8 bits per channel.

use crate::depthmap::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const RASTER_MAGIC: &str = "DFD16";

fn err(msg: impl Into<String>) -> Error {
    Error::Raster(msg.into())
}

pub fn raster_to_bytes(depth: &DepthMap, scale: f64) -> Result<Vec<u8>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(err(format!("scale {scale} must be positive")));
    }
    let mut bytes = format!("{RASTER_MAGIC} {} {} {scale}\n", depth.w(), depth.h()).into_bytes();
    for (i, &d) in depth.values().iter().enumerate() {
        let v = if !depth.valid()[i] {
            0u16
        } else {
            let q = (d / scale).round();
            if !(q >= 1.0 && q <= u16::MAX as f64) {
                return Err(err(format!(
                    "depth {d} m does not fit a 16-bit raster at scale {scale}"
                )));
            }
            q as u16
        };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<DepthMap> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| err("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (w, h, scale) = match fields.as_slice() {
        [RASTER_MAGIC, w, h, scale] => (
            w.parse::<usize>().map_err(|_| err("bad width"))?,
            h.parse::<usize>().map_err(|_| err("bad height"))?,
            scale.parse::<f64>().map_err(|_| err("bad scale"))?,
        ),
        _ => return Err(err(format!("bad header {header:?}"))),
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(err(format!("scale {scale} must be positive")));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != h * w * 2 {
        return Err(err(format!(
            "payload holds {} bytes, {}x{} needs {}",
            payload.len(),
            w,
            h,
            h * w * 2
        )));
    }
    let mut values = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for c in payload.chunks_exact(2) {
        let v = u16::from_le_bytes([c[0], c[1]]);
        valid.push(v != 0);
        values.push(v as f64 * scale);
    }
    DepthMap::new(h, w, values, valid)
}

pub fn write_raster(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    std::fs::write(path, raster_to_bytes(depth, scale)?)?;
    Ok(())
}

pub fn text_to_string(depth: &DepthMap) -> String {
    let mut out = format!("{} {}\n", depth.h(), depth.w());
    for y in 0..depth.h() {
        for x in 0..depth.w() {
            let sep = if x == 0 { "" } else { " " };
            let d = if depth.is_valid(y, x) {
                depth.value(y, x)
            } else {
                0.0
            };
            let _ = write!(out, "{sep}{d}");
        }
        out.push('\n');
    }
    out
}

pub fn text_from_str(text: &str) -> Result<DepthMap> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty depth text"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| err(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims.as_slice() else {
        return Err(err(format!("header {header:?} is not `H W`")));
    };
    let mut values = Vec::with_capacity(h * w);
    for (y, line) in lines.enumerate() {
        if y >= *h {
            if line.trim().is_empty() {
                continue;
            }
            return Err(err(format!("more than {h} data rows")));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            values.push(
                tok.parse::<f64>()
                    .map_err(|_| err(format!("bad value {tok:?} in row {y}")))?,
            );
        }
        if values.len() - before != *w {
            return Err(err(format!(
                "row {y} holds {} values, width is {w}",
                values.len() - before
            )));
        }
    }
    if values.len() != h * w {
        return Err(err(format!(
            "{} values for a {h}x{w} map",
            values.len()
        )));
    }
    DepthMap::from_positive(*h, *w, values)
}

pub fn write_text(path: &Path, depth: &DepthMap) -> Result<()> {
    std::fs::write(path, text_to_string(depth))?;
    Ok(())
}

/// Read either depth format, telling them apart by the raster magic.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(RASTER_MAGIC.as_bytes()) {
        raster_from_bytes(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| err(format!("{} is neither raster nor text depth", path.display())))?;
        text_from_str(text)
    }
}

/// Load a prediction/ground-truth pair, which must agree in size.
pub fn ingest_depth_pair(pred_path: &Path, gt_path: &Path) -> Result<(DepthMap, DepthMap)> {
    let pred = read_depth(pred_path)?;
    let gt = read_depth(gt_path)?;
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(err(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    Ok((pred, gt))
}

/// Write an image tensor [3,H,W] with channel values in [0,1] as
/// binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(Error::invalid(format!(
            "image shape {:?} is not [3,H,W]",
            image.shape()
        )));
    };
    if *c != 3 {
        return Err(Error::invalid(format!("image has {c} channels, want 3")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..*h {
        for x in 0..*w {
            for ch in 0..3 {
                let v = image.at(&[ch, y, x]).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
