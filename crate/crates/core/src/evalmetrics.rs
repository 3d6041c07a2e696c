//! 2D depth metrics and 3D point metrics with per-scene averaging.
//!
//! Depth metrics follow the usual masked definitions (ground truth valid
//! and deeper than 50 cm, prediction valid). Point metrics are exact
//! nearest-neighbor distances through a uniform grid index; accuracy and
//! completeness are means, precision/recall count points within the
//! threshold, and the F-score is averaged per scene rather than recomputed
//! from averaged precision/recall.

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use nalgebra::Vector3;
use std::collections::HashMap;

pub const DEFAULT_MIN_GT_DEPTH: f64 = 0.5;
pub const DEFAULT_POINT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthMetricsReport {
    pub abs_rel: f64,
    pub abs_diff: f64,
    pub abs_inv: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta_125: f64,
    pub delta_125_2: f64,
    pub delta_125_3: f64,
    pub pixel_count: usize,
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, min_gt: f64) -> Result<DepthMetricsReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "depth metrics: pred {}x{} vs gt {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut r = DepthMetricsReport::default();
    let mut count = 0usize;
    for i in 0..pred.depth.len() {
        if !(gt.valid[i] && gt.depth[i] > min_gt && pred.valid[i]) {
            continue;
        }
        let p = pred.depth[i];
        let g = gt.depth[i];
        let d = p - g;
        r.abs_rel += d.abs() / g;
        r.abs_diff += d.abs();
        r.abs_inv += (1.0 / p - 1.0 / g).abs();
        r.sq_rel += d * d / g;
        r.rmse += d * d;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            r.delta_125 += 1.0;
        }
        if ratio < 1.25 * 1.25 {
            r.delta_125_2 += 1.0;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            r.delta_125_3 += 1.0;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let n = count as f64;
    r.abs_rel /= n;
    r.abs_diff /= n;
    r.abs_inv /= n;
    r.sq_rel /= n;
    r.rmse = (r.rmse / n).sqrt();
    r.delta_125 /= n;
    r.delta_125_2 /= n;
    r.delta_125_3 /= n;
    r.pixel_count = count;
    debug_assert!(r.delta_125 <= r.delta_125_2 && r.delta_125_2 <= r.delta_125_3);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointMetricsReport {
    /// Mean pred-to-gt nearest distance (meters).
    pub acc: f64,
    /// Mean gt-to-pred nearest distance (meters).
    pub comp: f64,
    pub prec: f64,
    pub rec: f64,
    pub fscore: f64,
    pub tau: f64,
}

/// Exact nearest-neighbor queries through a uniform grid (cell edge = tau).
struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i32; 3], Vec<u32>>,
    key_min: [i32; 3],
    key_max: [i32; 3],
}

impl<'a> GridIndex<'a> {
    fn build(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<[i32; 3], Vec<u32>> = HashMap::new();
        let mut key_min = [i32::MAX; 3];
        let mut key_max = [i32::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            for c in 0..3 {
                key_min[c] = key_min[c].min(k[c]);
                key_max[c] = key_max[c].max(k[c]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        GridIndex { points, cell, cells, key_min, key_max }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i32; 3] {
        [
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        ]
    }

    /// Exact nearest distance by expanding Chebyshev shells: once a
    /// candidate within `r * cell` is found after scanning shell `r`, no
    /// farther shell can contain anything closer. Queries far outside the
    /// occupied grid fall back to a linear scan.
    fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let center = Self::key(q, self.cell);
        // queries well outside the occupied box would walk many empty
        // shells; a linear scan is cheaper and exact
        let outside = (0..3)
            .map(|c| (self.key_min[c] - center[c]).max(center[c] - self.key_max[c]).max(0))
            .max()
            .unwrap();
        if outside > 2 {
            return self.points.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        }
        // once the shell radius clears the whole occupied box, scanning
        // more shells is pointless
        let max_r = (0..3)
            .map(|c| (center[c] - self.key_min[c]).abs().max((self.key_max[c] - center[c]).abs()))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        let mut r = 0i32;
        loop {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(ids) = self.cells.get(&key) {
                            for &i in ids {
                                let d = (self.points[i as usize] - q).norm();
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
            if best <= r as f64 * self.cell || r > max_r {
                return best;
            }
            r += 1;
        }
    }
}

pub fn point_metrics(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    tau: f64,
) -> Result<PointMetricsReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let gt_index = GridIndex::build(gt, tau);
    let pred_index = GridIndex::build(pred, tau);
    let dists_pred: Vec<f64> = crate::parallel::par_chunk_map(pred.len(), 4096, |range| {
        range.map(|i| gt_index.nearest_distance(&pred[i])).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let dists_gt: Vec<f64> = crate::parallel::par_chunk_map(gt.len(), 4096, |range| {
        range.map(|i| pred_index.nearest_distance(&gt[i])).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let acc = dists_pred.iter().sum::<f64>() / pred.len() as f64;
    let comp = dists_gt.iter().sum::<f64>() / gt.len() as f64;
    let prec = dists_pred.iter().filter(|d| **d <= tau).count() as f64 / pred.len() as f64;
    let rec = dists_gt.iter().filter(|d| **d <= tau).count() as f64 / gt.len() as f64;
    let fscore = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    Ok(PointMetricsReport { acc, comp, prec, rec, fscore, tau })
}

/// Arithmetic mean per field; the F-score is the mean of per-scene
/// F-scores, which differs from the harmonic mean of the averaged
/// precision/recall.
pub fn aggregate_point_reports(reports: &[PointMetricsReport]) -> PointMetricsReport {
    assert!(!reports.is_empty());
    let n = reports.len() as f64;
    let mut out = PointMetricsReport::default();
    for r in reports {
        out.acc += r.acc;
        out.comp += r.comp;
        out.prec += r.prec;
        out.rec += r.rec;
        out.fscore += r.fscore;
        out.tau = r.tau;
    }
    out.acc /= n;
    out.comp /= n;
    out.prec /= n;
    out.rec /= n;
    out.fscore /= n;
    out
}

pub fn aggregate_depth_reports(reports: &[DepthMetricsReport]) -> DepthMetricsReport {
    assert!(!reports.is_empty());
    let n = reports.len() as f64;
    let mut out = DepthMetricsReport::default();
    for r in reports {
        out.abs_rel += r.abs_rel;
        out.abs_diff += r.abs_diff;
        out.abs_inv += r.abs_inv;
        out.sq_rel += r.sq_rel;
        out.rmse += r.rmse;
        out.delta_125 += r.delta_125;
        out.delta_125_2 += r.delta_125_2;
        out.delta_125_3 += r.delta_125_3;
        out.pixel_count += r.pixel_count;
    }
    out.abs_rel /= n;
    out.abs_diff /= n;
    out.abs_inv /= n;
    out.sq_rel /= n;
    out.rmse /= n;
    out.delta_125 /= n;
    out.delta_125_2 /= n;
    out.delta_125_3 /= n;
    out
}

/// One scene's metrics as a JSON line; `label` distinguishes report kinds.
pub fn depth_report_json(label: &str, r: &DepthMetricsReport) -> String {
    format!(
        "{{\"kind\":\"depth\",\"label\":\"{label}\",\"abs_rel\":{:.6},\"abs_diff\":{:.6},\"abs_inv\":{:.6},\"sq_rel\":{:.6},\"rmse\":{:.6},\"delta_125\":{:.6},\"delta_125_2\":{:.6},\"delta_125_3\":{:.6},\"pixels\":{}}}",
        r.abs_rel, r.abs_diff, r.abs_inv, r.sq_rel, r.rmse, r.delta_125, r.delta_125_2, r.delta_125_3, r.pixel_count
    )
}

pub fn point_report_json(label: &str, r: &PointMetricsReport) -> String {
    format!(
        "{{\"kind\":\"points\",\"label\":\"{label}\",\"acc_mean\":{:.6},\"comp_mean\":{:.6},\"prec\":{:.6},\"rec\":{:.6},\"fscore\":{:.6},\"tau\":{:.3}}}",
        r.acc, r.comp, r.prec, r.rec, r.fscore, r.tau
    )
}
