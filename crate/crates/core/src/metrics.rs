//! Depth evaluation protocol: threshold accuracies and error metrics
//! over the valid-pixel intersection, optional evaluation crops, optional
//! median alignment of the prediction to the ground truth, and
//! depth-range binning.
//!
//! All accumulations are plain row-major loops so results are
//! reproducible bit for bit.

use crate::depthmap::DepthMap;
use crate::error::{Error, Result};
use std::ops::Range;

pub const DELTA_BASE: f64 = 1.25;

/// Evaluation region. `Garg` keeps the usual fraction of a road-scene
/// frame (rows 151..=366, cols 44..=1179 at 370×1224); `EigenCenter`
/// keeps the center region (rows 45..=470, cols 41..=600 at 480×640).
/// Both scale proportionally at other resolutions via exact rational
/// arithmetic, so the native sizes reproduce the conventional indices
/// without float rounding surprises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Crop {
    #[default]
    None,
    Garg,
    EigenCenter,
}

impl Crop {
    /// Half-open pixel ranges (rows, cols) of the evaluation region.
    pub fn ranges(&self, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
        match self {
            Crop::None => (0..h, 0..w),
            Crop::Garg => (
                151 * h / 370..367 * h / 370,
                44 * w / 1224..1180 * w / 1224,
            ),
            Crop::EigenCenter => (45 * h / 480..471 * h / 480, 41 * w / 640..601 * w / 640),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Crop::None),
            "garg" => Ok(Crop::Garg),
            "eigen" => Ok(Crop::EigenCenter),
            _ => Err(Error::invalid(format!(
                "unknown crop {s:?} (expected none, garg, or eigen)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    /// 100·sqrt(var(ln pred − ln gt)).
    pub silog: f64,
    /// RMSE of inverse depth in 1/km.
    pub irmse: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 10] = [
        "delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog",
        "irmse",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.delta1,
            self.delta2,
            self.delta3,
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.silog,
            self.irmse,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        Metrics {
            delta1: v[0],
            delta2: v[1],
            delta3: v[2],
            abs_rel: v[3],
            sq_rel: v[4],
            rmse: v[5],
            rmse_log: v[6],
            log10: v[7],
            silog: v[8],
            irmse: v[9],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }
}

/// (pred, gt) pairs over the crop where both maps are valid.
pub fn collect_pairs(pred: &DepthMap, gt: &DepthMap, crop: Crop) -> Result<Vec<(f64, f64)>> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![pred.h(), pred.w()],
            rhs: vec![gt.h(), gt.w()],
        });
    }
    let (rows, cols) = crop.ranges(gt.h(), gt.w());
    let mut pairs = Vec::new();
    for y in rows {
        for x in cols.clone() {
            if gt.is_valid(y, x) && pred.is_valid(y, x) {
                pairs.push((pred.value(y, x), gt.value(y, x)));
            }
        }
    }
    Ok(pairs)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Scale every prediction by median(gt)/median(pred); returns the scale.
pub fn align_to_gt(pairs: &mut [(f64, f64)]) -> Result<f64> {
    let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let gts: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let scale = median(&gts)? / median(&preds)?;
    for p in pairs.iter_mut() {
        p.0 *= scale;
    }
    Ok(scale)
}

/// All ten metrics over one pixel set; single-pass, in-order
/// accumulation.
pub fn metrics_from_pairs(pairs: &[(f64, f64)]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = pairs.len() as f64;
    let (t1, t2, t3) = (
        DELTA_BASE,
        DELTA_BASE * DELTA_BASE,
        DELTA_BASE * DELTA_BASE * DELTA_BASE,
    );
    let (mut d1, mut d2, mut d3) = (0.0f64, 0.0f64, 0.0f64);
    let mut abs_rel = 0.0f64;
    let mut sq_rel = 0.0f64;
    let mut se = 0.0f64;
    let mut se_log = 0.0f64;
    let mut l10 = 0.0f64;
    let mut h_sum = 0.0f64;
    let mut h2_sum = 0.0f64;
    let mut se_inv = 0.0f64;
    for &(p, g) in pairs {
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::invalid(
                "metrics need strictly positive pred and gt depths",
            ));
        }
        let r = (p / g).max(g / p);
        if r < t1 {
            d1 += 1.0;
        }
        if r < t2 {
            d2 += 1.0;
        }
        if r < t3 {
            d3 += 1.0;
        }
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        let h = p.ln() - g.ln();
        se_log += h * h;
        l10 += (p.log10() - g.log10()).abs();
        h_sum += h;
        h2_sum += h * h;
        let di = 1000.0 / p - 1000.0 / g;
        se_inv += di * di;
    }
    Ok(Metrics {
        delta1: d1 / n,
        delta2: d2 / n,
        delta3: d3 / n,
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (se_log / n).sqrt(),
        log10: l10 / n,
        silog: {
            // clamp tiny negative rounding; NaN input stays NaN
            let mut var = h2_sum / n - (h_sum / n) * (h_sum / n);
            if var < 0.0 {
                var = 0.0;
            }
            100.0 * var.sqrt()
        },
        irmse: (se_inv / n).sqrt(),
    })
}

pub fn evaluate(pred: &DepthMap, gt: &DepthMap, crop: Crop, align: bool) -> Result<Metrics> {
    let mut pairs = collect_pairs(pred, gt, crop)?;
    if align {
        align_to_gt(&mut pairs)?;
    }
    metrics_from_pairs(&pairs)
}

/// Depth bins for range-wise reports; each bin keeps gt in (lo, hi].
pub fn default_bins() -> Vec<(f64, f64)> {
    vec![(0.0, 20.0), (20.0, 60.0), (60.0, 80.0)]
}

pub fn bin_label(lo: f64, hi: f64) -> String {
    fn fmt(x: f64) -> String {
        if x == x.trunc() && x.abs() < 1e15 {
            format!("{}", x as i64)
        } else {
            format!("{x}")
        }
    }
    format!("{}-{}", fmt(lo), fmt(hi))
}

/// Per-bin metrics plus an `Overall` row; bins with no pixels are
/// simply absent. Alignment, when requested, uses the full pixel set
/// once, before binning.
pub fn evaluate_binned(
    pred: &DepthMap,
    gt: &DepthMap,
    crop: Crop,
    align: bool,
    bins: &[(f64, f64)],
) -> Result<Vec<(String, Metrics)>> {
    let mut pairs = collect_pairs(pred, gt, crop)?;
    if align {
        align_to_gt(&mut pairs)?;
    }
    let mut rows = Vec::new();
    for &(lo, hi) in bins {
        let sub: Vec<(f64, f64)> = pairs
            .iter()
            .copied()
            .filter(|&(_, g)| lo < g && g <= hi)
            .collect();
        if sub.is_empty() {
            continue;
        }
        rows.push((bin_label(lo, hi), metrics_from_pairs(&sub)?));
    }
    rows.push(("Overall".to_string(), metrics_from_pairs(&pairs)?));
    Ok(rows)
}

/// Arithmetic mean of per-image metrics.
pub fn aggregate(all: &[Metrics]) -> Result<Metrics> {
    if all.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut sums = [0.0f64; 10];
    for m in all {
        for (s, v) in sums.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    for s in sums.iter_mut() {
        *s /= all.len() as f64;
    }
    Ok(Metrics::from_values(sums))
}

/// Mean per bin label across images, keeping the canonical row order
/// (bins, then Overall) and reporting how many images contributed.
pub fn aggregate_binned(
    per_image: &[Vec<(String, Metrics)>],
    bins: &[(f64, f64)],
) -> Vec<(String, Metrics, usize)> {
    let mut labels: Vec<String> = bins.iter().map(|&(lo, hi)| bin_label(lo, hi)).collect();
    labels.push("Overall".to_string());
    let mut out = Vec::new();
    for label in labels {
        let ms: Vec<Metrics> = per_image
            .iter()
            .filter_map(|rows| rows.iter().find(|(l, _)| *l == label).map(|(_, m)| *m))
            .collect();
        if let Ok(m) = aggregate(&ms) {
            out.push((label, m, ms.len()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: Vec<f64>) -> DepthMap {
        DepthMap::from_positive(h, w, values).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let m = evaluate(&gt, &gt, Crop::None, false).unwrap();
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.delta3, 1.0);
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.silog, 0.0);
        assert_eq!(m.irmse, 0.0);
    }

    #[test]
    fn ratio_130_percent() {
        let gt = map(2, 2, vec![1.0, 2.0, 5.0, 8.0]);
        let pred = map(2, 2, gt.values().iter().map(|v| 1.3 * v).collect());
        let m = evaluate(&pred, &gt, Crop::None, false).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
        assert!((m.abs_rel - 0.3).abs() <= 1e-15);
    }

    #[test]
    fn delta_monotonicity() {
        let gt = map(1, 6, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pred = map(1, 6, vec![1.1, 2.9, 3.05, 9.0, 5.2, 6.0]);
        let m = evaluate(&pred, &gt, Crop::None, false).unwrap();
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    }

    #[test]
    fn crop_ranges_pinned() {
        assert_eq!(Crop::Garg.ranges(370, 1224), (151..367, 44..1180));
        let (rows, cols) = Crop::EigenCenter.ranges(480, 640);
        assert_eq!((rows.clone(), cols.clone()), (45..471, 41..601));
        assert_eq!((rows.len(), cols.len()), (426, 560));
        assert_eq!(Crop::None.ranges(3, 7), (0..3, 0..7));
    }

    #[test]
    fn median_alignment_recovers_scale() {
        let gt = map(1, 5, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        let pred = map(1, 5, gt.values().iter().map(|v| 2.0 * v).collect());
        let m = evaluate(&pred, &gt, Crop::None, true).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.delta1, 1.0);

        let mut pairs: Vec<(f64, f64)> =
            pred.values().iter().zip(gt.values()).map(|(p, g)| (*p, *g)).collect();
        assert_eq!(align_to_gt(&mut pairs).unwrap(), 0.5);
    }

    #[test]
    fn hand_checked_values() {
        // single pixel pred 2, gt 4
        let m = metrics_from_pairs(&[(2.0, 4.0)]).unwrap();
        assert_eq!(m.rmse, 2.0);
        assert_eq!(m.abs_rel, 0.5);
        assert_eq!(m.sq_rel, 1.0);
        assert_eq!(m.irmse, 250.0);
        assert!((m.rmse_log - std::f64::consts::LN_2).abs() < 1e-15);

        // constant log-ratio: scale-invariant silog is zero
        let e = std::f64::consts::E;
        let m = metrics_from_pairs(&[(e, 1.0), (2.0 * e, 2.0)]).unwrap();
        assert!(m.silog < 1e-9);

        // ratios {1, e^2}: h = {0, 2}, var = 1, silog = 100
        let m = metrics_from_pairs(&[(1.0, 1.0), (e * e, 1.0)]).unwrap();
        assert!((m.silog - 100.0).abs() < 1e-9);
    }

    #[test]
    fn binned_rows_and_missing_bins() {
        let gt = map(1, 4, vec![5.0, 15.0, 30.0, 50.0]);
        let pred = map(1, 4, vec![5.5, 14.0, 33.0, 45.0]);
        let rows = evaluate_binned(&pred, &gt, Crop::None, false, &default_bins()).unwrap();
        let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
        // nothing beyond 60 m: that bin is absent
        assert_eq!(labels, ["0-20", "20-60", "Overall"]);

        let agg = aggregate_binned(&[rows.clone(), rows], &default_bins());
        assert_eq!(agg.len(), 3);
        assert_eq!(agg[0].2, 2);
        assert_eq!(agg.last().unwrap().0, "Overall");
    }

    #[test]
    fn validity_intersection_and_errors() {
        let gt = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        let pred = DepthMap::new(1, 3, vec![1.0, 2.0, 0.0], vec![true, true, false]).unwrap();
        let pairs = collect_pairs(&pred, &gt, Crop::None).unwrap();
        assert_eq!(pairs, vec![(1.0, 1.0)]);

        let empty = DepthMap::new(1, 1, vec![1.0], vec![false]).unwrap();
        assert!(matches!(
            evaluate(&empty, &empty, Crop::None, false),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn aggregate_is_componentwise_mean() {
        let a = Metrics::from_values([1.0, 1.0, 1.0, 0.2, 0.1, 1.0, 0.5, 0.1, 10.0, 5.0]);
        let b = Metrics::from_values([0.0, 1.0, 1.0, 0.4, 0.3, 3.0, 1.5, 0.3, 30.0, 15.0]);
        let m = aggregate(&[a, b]).unwrap();
        assert_eq!(m.delta1, 0.5);
        assert_eq!(m.abs_rel, 0.30000000000000004);
        assert_eq!(m.silog, 20.0);
        assert!(aggregate(&[]).is_err());
    }
}
