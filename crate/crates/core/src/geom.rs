//! Pinhole camera model, LiDAR/camera transforms and range-map rasterization.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Field;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Intrinsics plus the rigid transform taking LiDAR coordinates to the camera
/// frame: `X_cam = R * X_lidar + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigFile", into = "RigFile")]
pub struct CalibratedRig {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    r: Mat3,
    t: Vec3,
    width: usize,
    height: usize,
}

/// On-disk calibration layout (`R` row-major).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RigFile {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
}

impl TryFrom<RigFile> for CalibratedRig {
    type Error = Error;

    fn try_from(f: RigFile) -> Result<Self> {
        let r = [
            [f.r[0], f.r[1], f.r[2]],
            [f.r[3], f.r[4], f.r[5]],
            [f.r[6], f.r[7], f.r[8]],
        ];
        CalibratedRig::new(f.fx, f.fy, f.px, f.py, r, f.t, f.width, f.height)
    }
}

impl From<CalibratedRig> for RigFile {
    fn from(c: CalibratedRig) -> Self {
        let r = &c.r;
        RigFile {
            fx: c.fx,
            fy: c.fy,
            px: c.px,
            py: c.py,
            r: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            t: c.t,
            width: c.width,
            height: c.height,
        }
    }
}

impl CalibratedRig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        px: f64,
        py: f64,
        r: Mat3,
        t: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Calibration(m));
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got ({fx}, {fy})"));
        }
        if !(px >= 0.0 && px < width as f64 && py >= 0.0 && py < height as f64) {
            return bad(format!(
                "principal point ({px}, {py}) outside {width}x{height} image"
            ));
        }
        if t.iter().chain(r.iter().flatten()).any(|x| !x.is_finite()) {
            return bad("non-finite extrinsics".into());
        }
        let rrt = mat_mul(&r, &transpose(&r));
        for (i, row) in rrt.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (x - want).abs() > 1e-9 {
                    return bad("rotation is not orthonormal".into());
                }
            }
        }
        let det = det3(&r);
        if (det - 1.0).abs() > 1e-9 {
            return bad(format!("rotation determinant is {det}, expected 1"));
        }
        Ok(Self {
            fx,
            fy,
            px,
            py,
            r,
            t,
            width,
            height,
        })
    }

    /// Camera and LiDAR frames coincide.
    pub fn identity(fx: f64, fy: f64, px: f64, py: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, px, py, IDENTITY, [0.0; 3], width, height)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn principal_point(&self) -> (f64, f64) {
        (self.px, self.py)
    }
    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }
    pub fn translation(&self) -> &Vec3 {
        &self.t
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// The same rig observing a sub-window starting at pixel `(u0, v0)`.
    pub fn cropped(&self, u0: usize, v0: usize, width: usize, height: usize) -> Result<Self> {
        Self::new(
            self.fx,
            self.fy,
            self.px - u0 as f64,
            self.py - v0 as f64,
            self.r,
            self.t,
            width,
            height,
        )
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let mut c = mat_vec(&self.r, p);
        for (ci, ti) in c.iter_mut().zip(&self.t) {
            *ci += ti;
        }
        c
    }

    /// Projects a LiDAR-frame point; returns the pixel and the camera-frame depth.
    pub fn project(&self, p: &Vec3) -> Result<((f64, f64), f64)> {
        let c = self.to_camera(p);
        let z = c[2];
        if z <= 1e-9 {
            return Err(Error::BehindCamera { z_cam: z });
        }
        Ok((
            (self.fx * c[0] / z + self.px, self.fy * c[1] / z + self.py),
            z,
        ))
    }

    /// Lifts pixel `(u, v)` at camera depth `z` to the LiDAR frame:
    /// `P = z R^T K^-1 p - R^T t`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Result<Vec3> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidDepth(z));
        }
        Ok(self.back_project_unchecked(u, v, z))
    }

    #[inline]
    pub(crate) fn back_project_unchecked(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let cam = [
            z * (u - self.px) / self.fx - self.t[0],
            z * (v - self.py) / self.fy - self.t[1],
            z - self.t[2],
        ];
        mat_vec(&transpose(&self.r), &cam)
    }
}

/// LiDAR sweep in the sensor frame, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub epoch: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, epoch: u64) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Format(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self { points, epoch })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sparse image-plane raster of camera-frame depths.
///
/// Invalid pixels hold depth 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRangeMap {
    depth: Field,
    valid: Vec<bool>,
}

impl SparseRangeMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depth: Field::zeros(width, height, 1),
            valid: vec![false; width * height],
        }
    }

    /// Marks `(u, v)` valid with `depth` unless a nearer depth is already stored.
    pub fn insert_nearest(&mut self, u: usize, v: usize, depth: f64) {
        debug_assert!(depth > 0.0 && depth.is_finite());
        let i = v * self.width() + u;
        if !self.valid[i] || depth < self.depth.data()[i] {
            self.valid[i] = true;
            self.depth.data_mut()[i] = depth;
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn depth(&self) -> &Field {
        &self.depth
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width() + u]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Valid pixels as `(u, v, depth)` in row-major order.
    pub fn samples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width();
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .map(move |(i, _)| (i % w, i / w, self.depth.data()[i]))
    }

    /// Restricts the map to a sub-window.
    pub fn crop(&self, u0: usize, v0: usize, width: usize, height: usize) -> Result<Self> {
        let depth = self.depth.crop(u0, v0, width, height)?;
        let mut valid = Vec::with_capacity(width * height);
        for v in v0..v0 + height {
            let a = v * self.width() + u0;
            valid.extend_from_slice(&self.valid[a..a + width]);
        }
        Ok(Self { depth, valid })
    }

    /// Valid-weighted 2x2 block mean, one level coarser.
    pub fn downsample(&self) -> Result<Self> {
        let (w, h) = (self.width(), self.height());
        if w % 2 != 0 || h % 2 != 0 {
            return Err(Error::Shape(format!("cannot halve range map {w}x{h}")));
        }
        let mut out = Self::empty(w / 2, h / 2);
        for v in 0..h / 2 {
            for u in 0..w / 2 {
                let (mut s, mut n) = (0.0, 0usize);
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (x, y) = (2 * u + du, 2 * v + dv);
                    if self.is_valid(x, y) {
                        s += self.depth.get(x, y, 0);
                        n += 1;
                    }
                }
                if n > 0 {
                    out.insert_nearest(u, v, s / n as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Projects every point and keeps the nearest depth per rounded pixel.
/// Points behind the camera or outside the frame are dropped.
pub fn rasterize_range_map(cloud: &PointCloud, rig: &CalibratedRig) -> SparseRangeMap {
    let (w, h) = (rig.width(), rig.height());
    let mut map = SparseRangeMap::empty(w, h);
    for p in &cloud.points {
        let Ok(((u, v), z)) = rig.project(p) else {
            continue;
        };
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 || ui >= w as f64 || vi >= h as f64 {
            continue;
        }
        map.insert_nearest(ui as usize, vi as usize, z);
    }
    map
}

/// Uniform sample without replacement of `round(ratio * n)` points, in input
/// order.
pub fn downsample_cloud(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    split_cloud(cloud, ratio, seed).map(|(kept, _)| kept)
}

/// Partitions a sweep into the `downsample_cloud` sample and the points it
/// left out, both in input order.
pub fn split_cloud(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<(PointCloud, PointCloud)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "downsampling ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let n = cloud.len();
    let k = ((ratio * n as f64).round() as usize).min(n);
    let empty = PointCloud {
        points: Vec::new(),
        epoch: cloud.epoch,
    };
    if k == n {
        return Ok((cloud.clone(), empty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        keep[i] = true;
    }
    let (mut kept, mut held) = (empty.clone(), empty);
    for (p, k) in cloud.points.iter().zip(keep) {
        if k {
            kept.points.push(*p);
        } else {
            held.points.push(*p);
        }
    }
    Ok((kept, held))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
