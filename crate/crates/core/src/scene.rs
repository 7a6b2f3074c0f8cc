//! Procedural synthetic scenes: a planar depth gradient with
//! axis-aligned rectangles floating in front, colored by a fixed smooth
//! map from depth plus per-rectangle albedo so depth is learnable from
//! appearance alone. Generation is bit-deterministic per spec.

use crate::depthmap::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub n_rects: usize,
    /// Background plane (offset, gx, gy):
    /// depth(y,x) = offset + gx·x/W + gy·y/H, clamped to [d_min, d_max].
    pub background: (f64, f64, f64),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::invalid("scene size must be positive"));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "scene depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize, // exclusive
    pub y1: usize, // exclusive
    pub depth: f64,
    pub jitter: f64, // in [-1, 1]
    pub albedo: f64, // in [0.2, 0.9]
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }
}

/// The scene's rectangles, in draw order (fixed per seed).
pub fn rectangles(spec: &SceneSpec) -> Vec<Rect> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_rects)
        .map(|_| {
            let rh = rng.gen_range(1..=(spec.h / 2).max(1));
            let y0 = rng.gen_range(0..=spec.h - rh);
            let rw = rng.gen_range(1..=(spec.w / 2).max(1));
            let x0 = rng.gen_range(0..=spec.w - rw);
            Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
                depth: rng.gen_range(spec.d_min..spec.d_max),
                jitter: rng.gen_range(-1.0..1.0),
                albedo: rng.gen_range(0.2..0.9),
            }
        })
        .collect()
}

const BACKGROUND_ALBEDO: f64 = 0.25;

/// Color for normalized depth t in [0,1] with a surface's jitter and
/// albedo. The red channel is affine in t (invertible up to the small
/// jitter), green is a smooth second view of t, blue carries albedo.
fn shade(t: f64, jitter: f64, albedo: f64) -> [f64; 3] {
    [
        0.05 + 0.9 * t + 0.05 * jitter,
        0.5 + 0.5 * (std::f64::consts::PI * t).cos(),
        albedo,
    ]
}

/// Deterministic (image, depth) pair; depths lie in [d_min, d_max] and
/// every pixel is valid. Where surfaces overlap the nearest one wins.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Tensor, DepthMap)> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let rects = rectangles(spec);
    let (off, gx, gy) = spec.background;

    let mut depth = vec![0.0f64; h * w];
    let mut owner = vec![usize::MAX; h * w]; // MAX = background
    for y in 0..h {
        for x in 0..w {
            let plane = off + gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
            depth[y * w + x] = plane.clamp(spec.d_min, spec.d_max);
        }
    }
    for (i, r) in rects.iter().enumerate() {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if r.depth < depth[y * w + x] {
                    depth[y * w + x] = r.depth;
                    owner[y * w + x] = i;
                }
            }
        }
    }

    let range = spec.d_max - spec.d_min;
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = (depth[i] - spec.d_min) / range;
            let (jit, alb) = match owner[i] {
                usize::MAX => (0.0, BACKGROUND_ALBEDO),
                k => (rects[k].jitter, rects[k].albedo),
            };
            let rgb = shade(t, jit, alb);
            for (c, v) in rgb.iter().enumerate() {
                image.set(&[c, y, x], *v);
            }
        }
    }
    let depth = DepthMap::new(h, w, depth, vec![true; h * w])?;
    Ok((image, depth))
}

/// A family of scene specs with varied backgrounds, deterministic in
/// `base_seed`.
pub fn scene_set(
    count: usize,
    base_seed: u64,
    h: usize,
    w: usize,
    d_min: f64,
    d_max: f64,
    n_rects: usize,
) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let range = d_max - d_min;
    (0..count)
        .map(|i| {
            let offset = rng.gen_range(d_min + 0.3 * range..d_min + 0.7 * range);
            let gx = rng.gen_range(-0.25 * range..0.25 * range);
            let gy = rng.gen_range(-0.25 * range..0.25 * range);
            SceneSpec {
                seed: base_seed ^ 0x5ce0_5eed ^ ((i as u64) << 20),
                h,
                w,
                d_min,
                d_max,
                n_rects,
                background: (offset, gx, gy),
            }
        })
        .collect()
}
