//! Evaluation metrics: frame reconstruction error, ternary census loss, global
//! SSIM, banded depth errors and flow endpoint error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{SSIM_C1, SSIM_C2};
use crate::error::{Error, Result};
use crate::geom::{CalibratedRig, PointCloud};
use crate::raster::{bilinear_sample, Field};

pub const DEFAULT_CENSUS_EPS: f64 = 0.04;

/// Root-mean-square difference over all pixels and channels.
pub fn rmsd(a: &Field, b: &Field) -> Result<f64> {
    a.check_same_dims(b, "rmsd")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sq = row_sums(a, |i| (a.data()[i] - b.data()[i]).powi(2));
    Ok((sq / a.len() as f64).sqrt())
}

/// Sums `f(i)` over every value index, per row then across rows in order.
fn row_sums(field: &Field, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let row = field.width() * field.channels();
    let sums: Vec<f64> = (0..field.height())
        .into_par_iter()
        .map(|v| (v * row..(v + 1) * row).map(&f).sum::<f64>())
        .collect();
    sums.iter().sum()
}

fn ternary(center: f64, neighbour: f64, eps: f64) -> i8 {
    if neighbour - center >= eps {
        -1
    } else if center - neighbour >= eps {
        1
    } else {
        0
    }
}

/// 3x3 ternary census signature comparison: the fraction of the eight
/// neighbour entries, over all pixels and channels, whose ternary codes
/// differ. Neighbours beyond the border are clamped to the edge.
pub fn census_loss(a: &Field, b: &Field, eps: f64) -> Result<f64> {
    a.check_same_dims(b, "census")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let (w, h, c) = (a.width(), a.height(), a.channels());
    const OFFSETS: [(isize, isize); 8] =
        [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let rows: Vec<usize> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut miss = 0;
            for u in 0..w {
                for ch in 0..c {
                    let (ca, cb) = (a.get(u, v, ch), b.get(u, v, ch));
                    for (du, dv) in OFFSETS {
                        let x = clamp(u as isize + du, w);
                        let y = clamp(v as isize + dv, h);
                        if ternary(ca, a.get(x, y, ch), eps) != ternary(cb, b.get(x, y, ch), eps) {
                            miss += 1;
                        }
                    }
                }
            }
            miss
        })
        .collect();
    let total: usize = rows.iter().sum();
    Ok(total as f64 / (8 * a.len()) as f64)
}

/// Single-window SSIM over the whole image with population statistics.
pub fn ssim_index(x: &Field, y: &Field) -> Result<f64> {
    x.check_same_dims(y, "ssim")?;
    if x.is_empty() {
        return Err(Error::Shape("ssim of an empty image".into()));
    }
    let n = x.len() as f64;
    let (xd, yd) = (x.data(), y.data());
    let mx = row_sums(x, |i| xd[i]) / n;
    let my = row_sums(x, |i| yd[i]) / n;
    let vx = row_sums(x, |i| (xd[i] - mx).powi(2)) / n;
    let vy = row_sums(x, |i| (yd[i] - my).powi(2)) / n;
    let cov = row_sums(x, |i| (xd[i] - mx) * (yd[i] - my)) / n;
    Ok((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
}

/// Band edges on LiDAR-frame range, meters.
pub const DEPTH_BANDS: [f64; 3] = [10.0, 30.0, 50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub mae10: Option<f64>,
    pub mae30: Option<f64>,
    pub mae50: Option<f64>,
    /// Percent, over all points within 50 m.
    pub abs_rel: Option<f64>,
    pub n10: usize,
    pub n30: usize,
    pub n50: usize,
}

/// One evaluated ground-truth point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub range: f64,
    pub gt: f64,
    pub predicted: f64,
}

/// Projects each ground-truth point and samples the prediction bilinearly at
/// its sub-pixel position. Points behind the camera or outside the image are
/// skipped.
pub fn depth_samples(depth: &Field, cloud: &PointCloud, rig: &CalibratedRig) -> Vec<DepthSample> {
    let (w, h) = (depth.width() as f64, depth.height() as f64);
    cloud
        .points
        .par_iter()
        .filter_map(|p| {
            let ((u, v), z) = rig.project(p).ok()?;
            if !(u >= -0.5 && u < w - 0.5 && v >= -0.5 && v < h - 0.5) {
                return None;
            }
            Some(DepthSample {
                range: (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt(),
                gt: z,
                predicted: bilinear_sample(depth, u, v)[0],
            })
        })
        .collect()
}

pub fn depth_eval(depth: &Field, cloud: &PointCloud, rig: &CalibratedRig) -> Result<DepthEvalReport> {
    if depth.channels() != 1 {
        return Err(Error::Shape("depth must have one channel".into()));
    }
    Ok(summarize_depth(&depth_samples(depth, cloud, rig)))
}

pub fn summarize_depth(samples: &[DepthSample]) -> DepthEvalReport {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut rel = 0.0;
    for s in samples {
        let err = (s.predicted - s.gt).abs();
        for (k, edge) in DEPTH_BANDS.iter().enumerate() {
            if s.range <= *edge {
                sums[k] += err;
                counts[k] += 1;
            }
        }
        if s.range <= DEPTH_BANDS[2] {
            rel += err / s.gt;
        }
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    DepthEvalReport {
        mae10: mean(0),
        mae30: mean(1),
        mae50: mean(2),
        abs_rel: (counts[2] > 0).then(|| 100.0 * rel / counts[2] as f64),
        n10: counts[0],
        n30: counts[1],
        n50: counts[2],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointError {
    pub mean: f64,
    /// Share of pixels with error below the threshold.
    pub fraction_below: f64,
}

pub fn endpoint_error(flow: &Field, gt: &Field, threshold: f64) -> Result<EndpointError> {
    endpoint_error_masked(flow, gt, threshold, None)
}

/// Endpoint error restricted to pixels where `mask` is nonzero.
pub fn endpoint_error_masked(
    flow: &Field,
    gt: &Field,
    threshold: f64,
    mask: Option<&Field>,
) -> Result<EndpointError> {
    flow.check_same_dims(gt, "endpoint error")?;
    if flow.channels() != 2 {
        return Err(Error::Shape("endpoint error needs 2-channel flows".into()));
    }
    if let Some(m) = mask {
        if m.width() != flow.width() || m.height() != flow.height() {
            return Err(Error::Shape("endpoint error mask size differs".into()));
        }
    }
    let w = flow.width();
    let rows: Vec<(f64, usize, usize)> = (0..flow.height())
        .into_par_iter()
        .map(|v| {
            let (mut s, mut below, mut n) = (0.0, 0, 0);
            for u in 0..w {
                if mask.is_some_and(|m| m.get(u, v, 0) == 0.0) {
                    continue;
                }
                let (a, b) = (flow.pixel(u, v), gt.pixel(u, v));
                let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                s += e;
                n += 1;
                if e < threshold {
                    below += 1;
                }
            }
            (s, below, n)
        })
        .collect();
    let (s, below, n) = rows
        .iter()
        .fold((0.0, 0, 0), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2));
    if n == 0 {
        return Ok(EndpointError {
            mean: 0.0,
            fraction_below: 1.0,
        });
    }
    Ok(EndpointError {
        mean: s / n as f64,
        fraction_below: below as f64 / n as f64,
    })
}
