//! Pinhole back-projection of a depth map into a metric point cloud.

use crate::depthmap::DepthMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths ({fx}, {fy}) must be positive"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Principal point at the image center, unit focal length.
    pub fn centered(h: usize, w: usize) -> Self {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }
}

/// Camera-frame points for every valid pixel, row-major order:
/// X = (u − cx)·Z/fx, Y = (v − cy)·Z/fy, Z = depth at (v, u).
pub fn unproject(depth: &DepthMap, k: &Intrinsics) -> Vec<[f64; 3]> {
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.h() {
        for u in 0..depth.w() {
            if !depth.is_valid(v, u) {
                continue;
            }
            let z = depth.value(v, u);
            points.push([
                (u as f64 - k.cx) * z / k.fx,
                (v as f64 - k.cy) * z / k.fy,
                z,
            ]);
        }
    }
    points
}

/// One `X Y Z` line per point.
pub fn points_to_string(points: &[[f64; 3]]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_point_maps_to_axis() {
        let k = Intrinsics::new(2.0, 3.0, 1.0, 1.0).unwrap();
        let mut vals = vec![1.0; 9];
        vals[4] = 5.0; // pixel (1,1) = principal point
        let d = DepthMap::from_positive(3, 3, vals).unwrap();
        let pts = unproject(&d, &k);
        assert_eq!(pts[4], [0.0, 0.0, 5.0]);
    }

    #[test]
    fn pinned_example() {
        // fx = fy = 1, cx = cy = 0: pixel (u=2, v=3) at depth 4
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let mut vals = vec![0.0; 4 * 4];
        vals[3 * 4 + 2] = 4.0;
        let d = DepthMap::from_positive(4, 4, vals).unwrap();
        let pts = unproject(&d, &k);
        assert_eq!(pts, vec![[8.0, 12.0, 4.0]]);
    }

    #[test]
    fn doubling_depth_doubles_all_coordinates() {
        let k = Intrinsics::new(1.5, 2.5, 0.5, 0.25).unwrap();
        let d1 = DepthMap::from_positive(2, 3, (1..=6).map(f64::from).collect()).unwrap();
        let d2 = DepthMap::from_positive(2, 3, (1..=6).map(|v| 2.0 * f64::from(v)).collect())
            .unwrap();
        for (a, b) in unproject(&d1, &k).iter().zip(unproject(&d2, &k).iter()) {
            for c in 0..3 {
                assert!((b[c] - 2.0 * a[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_pixels_skipped() {
        let d = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        let pts = unproject(&d, &Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap());
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1][2], 3.0);
    }

    #[test]
    fn bad_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -2.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn point_lines() {
        let s = points_to_string(&[[1.0, -2.5, 3.0], [0.0, 0.0, 1.0]]);
        assert_eq!(s, "1 -2.5 3\n0 0 1\n");
    }
}
