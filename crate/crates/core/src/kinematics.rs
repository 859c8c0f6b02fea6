//! Temporal flow smoothing, lifting of optical flow to 3D scene flow, speed
//! profiles over a region of interest and channel cross-sections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geom::{CalibratedRig, Vec3};
use crate::raster::{backward_warp, bilinear_sample, Field};

pub const DEFAULT_TEMPORAL_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.25];
/// 25 Hz camera.
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.04;

/// Blends the flow of pair 1 with the flows of its neighbours propagated
/// under a constant-velocity assumption:
/// `l0 * w(O0_f, O0_b) + l1 * O1_f + l2 * w(O2_f, O1_f)`.
pub fn smooth_flow(
    o0_f: &Field,
    o0_b: &Field,
    o1_f: &Field,
    o2_f: &Field,
    lambda: [f64; 3],
) -> Result<Field> {
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::Config(format!(
            "temporal weights must sum to 1, got {sum}"
        )));
    }
    for (f, name) in [(o0_f, "O0_f"), (o0_b, "O0_b"), (o2_f, "O2_f")] {
        if !f.same_dims(o1_f) || f.channels() != 2 {
            return Err(shape_err(format!("smooth_flow: {name} does not match O1_f")));
        }
    }
    let prev = backward_warp(o0_f, o0_b)?;
    let next = backward_warp(o2_f, o1_f)?;
    let data = prev
        .data()
        .iter()
        .zip(o1_f.data())
        .zip(next.data())
        .map(|((a, b), c)| lambda[0] * a + lambda[1] * b + lambda[2] * c)
        .collect();
    Field::from_vec(o1_f.width(), o1_f.height(), 2, data)
}

/// Per-pixel 3D positions at epoch t and displacement to epoch t+1, in the
/// LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowFrame {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    /// Meters per frame interval.
    pub velocity: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl SceneFlowFrame {
    /// Marks pixels with `keep == 0` invalid.
    pub fn restrict(&mut self, keep: &Field) -> Result<()> {
        if keep.width() != self.width || keep.height() != self.height {
            return Err(shape_err("restrict: mask size differs"));
        }
        for (v, &k) in self.valid.iter_mut().zip(keep.data()) {
            *v &= k != 0.0;
        }
        Ok(())
    }

    /// Speed in m/s per pixel; invalid pixels get NaN.
    pub fn speeds(&self, frame_interval: f64) -> Field {
        let data = self
            .velocity
            .iter()
            .zip(&self.valid)
            .map(|(v, &ok)| if ok { norm(v) / frame_interval } else { f64::NAN })
            .collect();
        Field::from_vec(self.width, self.height, 1, data).expect("frame size")
    }
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `P_t = back_project(p, D_t(p))`,
/// `P_t1 = back_project(p + O_f, D_t1(p + O_f))`, velocity `P_t1 - P_t`.
pub fn lift_to_scene_flow(
    flow: &Field,
    depth_t: &Field,
    depth_t1: &Field,
    rig: &CalibratedRig,
) -> Result<SceneFlowFrame> {
    let (w, h) = (flow.width(), flow.height());
    if flow.channels() != 2 {
        return Err(shape_err("lift: flow must have 2 channels"));
    }
    depth_t.check_same_dims(depth_t1, "lift depths")?;
    if depth_t.width() != w || depth_t.height() != h || depth_t.channels() != 1 {
        return Err(shape_err("lift: depth and flow sizes differ"));
    }
    let rows: Vec<Vec<(Vec3, Vec3, bool)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let f = flow.pixel(u, v);
                    let (u1, v1) = (u as f64 + f[0], v as f64 + f[1]);
                    let z0 = depth_t.get(u, v, 0);
                    let z1 = bilinear_sample(depth_t1, u1, v1)[0];
                    match (
                        rig.back_project(u as f64, v as f64, z0),
                        rig.back_project(u1, v1, z1),
                    ) {
                        (Ok(p0), Ok(p1)) => {
                            let vel = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                            let ok = vel.iter().all(|x| x.is_finite());
                            (p0, vel, ok)
                        }
                        (Ok(p0), Err(_)) => (p0, [0.0; 3], false),
                        _ => ([f64::NAN; 3], [0.0; 3], false),
                    }
                })
                .collect()
        })
        .collect();
    let mut frame = SceneFlowFrame {
        width: w,
        height: h,
        points: Vec::with_capacity(w * h),
        velocity: Vec::with_capacity(w * h),
        valid: Vec::with_capacity(w * h),
    };
    for (p, vel, ok) in rows.into_iter().flatten() {
        frame.points.push(p);
        frame.velocity.push(vel);
        frame.valid.push(ok);
    }
    Ok(frame)
}

/// Axis-aligned box on the LiDAR x and y axes; z is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Default for Region {
    fn default() -> Self {
        Self {
            x0: -1.0,
            x1: 1.0,
            y0: 19.0,
            y1: 21.0,
        }
    }
}

impl Region {
    pub fn contains(&self, p: &Vec3) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub epochs: Vec<u64>,
    /// m/s; `None` when no valid pixel fell in the region.
    pub speeds: Vec<Option<f64>>,
    pub region: Region,
    pub frame_interval: f64,
}

impl SpeedProfile {
    /// CSV with header `epoch,time_s,speed_mps`; missing speeds are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,time_s,speed_mps\n");
        for (e, sp) in self.epochs.iter().zip(&self.speeds) {
            let t = *e as f64 * self.frame_interval;
            match sp {
                Some(x) => s.push_str(&format!("{e},{t},{x}\n")),
                None => s.push_str(&format!("{e},{t},\n")),
            }
        }
        s
    }
}

/// Mean speed of the valid pixels whose `P_t` lies in `region`, per epoch.
pub fn speed_profile(
    frames: &[(u64, SceneFlowFrame)],
    region: Region,
    frame_interval: f64,
) -> Result<SpeedProfile> {
    if frames.is_empty() {
        return Err(Error::Config("speed profile needs at least one frame".into()));
    }
    if !(frame_interval > 0.0) {
        return Err(Error::Config("frame interval must be positive".into()));
    }
    let speeds = frames
        .par_iter()
        .map(|(_, f)| region_mean_speed(f, &region, frame_interval))
        .collect();
    Ok(SpeedProfile {
        epochs: frames.iter().map(|(e, _)| *e).collect(),
        speeds,
        region,
        frame_interval,
    })
}

fn region_mean_speed(frame: &SceneFlowFrame, region: &Region, dt: f64) -> Option<f64> {
    let (sum, n) = frame
        .points
        .iter()
        .zip(&frame.velocity)
        .zip(&frame.valid)
        .filter(|((p, _), &ok)| ok && region.contains(p))
        .fold((0.0, 0usize), |(s, n), ((_, v), _)| (s + norm(v) / dt, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `(x, speed)` pairs for rows `v_range.0..=v_range.1`, averaged into x-bins
/// of width `bin_width` meters. Bins are reported at their centers.
pub fn channel_cross_section(
    frame: &SceneFlowFrame,
    speeds: &Field,
    v_range: (usize, usize),
    bin_width: f64,
) -> Result<Vec<(f64, f64)>> {
    if speeds.width() != frame.width || speeds.height() != frame.height {
        return Err(shape_err("cross-section: speed raster size differs"));
    }
    if v_range.0 > v_range.1 || v_range.1 >= frame.height {
        return Err(Error::Config(format!(
            "row band {}..={} outside image height {}",
            v_range.0, v_range.1, frame.height
        )));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config("bin width must be positive".into()));
    }
    let mut bins: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for v in v_range.0..=v_range.1 {
        for u in 0..frame.width {
            let i = v * frame.width + u;
            let s = speeds.data()[i];
            if !frame.valid[i] || !s.is_finite() {
                continue;
            }
            let k = (frame.points[i][0] / bin_width).floor() as i64;
            let e = bins.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(k, (s, n))| ((k as f64 + 0.5) * bin_width, s / n as f64))
        .collect())
}

/// Cross-section CSV with header `x_m,speed_mps`.
pub fn cross_section_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("x_m,speed_mps\n");
    for (x, v) in rows {
        s.push_str(&format!("{x},{v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::IDENTITY;

    fn rig() -> CalibratedRig {
        CalibratedRig::new(100.0, 100.0, 8.0, 6.0, IDENTITY, [0.0; 3], 16, 12).unwrap()
    }

    #[test]
    fn identity_weights_return_middle_flow() {
        let a = Field::from_fn(6, 5, 2, |u, v, c| (u + 2 * v + c) as f64 * 0.3 - 1.0);
        let b = Field::from_fn(6, 5, 2, |u, v, c| (u * v + c) as f64 * -0.2);
        let out = smooth_flow(&a, &b, &b, &a, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn constant_velocity_is_fixed_point() {
        let u = Field::from_fn(6, 5, 2, |_, _, c| if c == 0 { 0.7 } else { -0.4 });
        let neg = u.map(|x| -x);
        let out = smooth_flow(&u, &neg, &u, &u, DEFAULT_TEMPORAL_WEIGHTS).unwrap();
        for (a, b) in out.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        let z = Field::zeros(4, 4, 2);
        assert!(matches!(
            smooth_flow(&z, &z, &z, &z, [0.3, 0.3, 0.3]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_flow_equal_depth_gives_zero_velocity() {
        let d = Field::from_fn(16, 12, 1, |u, v, _| 10.0 + u as f64 * 0.1 + v as f64 * 0.2);
        let f = lift_to_scene_flow(&Field::zeros(16, 12, 2), &d, &d, &rig()).unwrap();
        assert!(f.valid.iter().all(|&v| v));
        assert!(f.velocity.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn depth_change_moves_along_ray() {
        let d0 = Field::filled(16, 12, 1, 10.0);
        let d1 = Field::filled(16, 12, 1, 12.0);
        let f = lift_to_scene_flow(&Field::zeros(16, 12, 2), &d0, &d1, &rig()).unwrap();
        let i = 3 * 16 + 5;
        let ray = [(5.0 - 8.0) / 100.0, (3.0 - 6.0) / 100.0, 1.0];
        for k in 0..3 {
            assert!((f.velocity[i][k] - 2.0 * ray[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_depth_marks_pixel_invalid() {
        let mut d1 = Field::filled(16, 12, 1, 10.0);
        d1.set(4, 4, 0, -1.0);
        let f = lift_to_scene_flow(&Field::zeros(16, 12, 2), &Field::filled(16, 12, 1, 10.0), &d1, &rig())
            .unwrap();
        assert!(!f.valid[4 * 16 + 4]);
        assert_eq!(f.valid.iter().filter(|v| !**v).count(), 1);
    }

    fn uniform_frame(vel: Vec3) -> SceneFlowFrame {
        let n = 4;
        SceneFlowFrame {
            width: 2,
            height: 2,
            points: vec![[0.0, 20.0, 0.0], [0.5, 19.5, 3.0], [5.0, 20.0, 0.0], [0.0, 30.0, 0.0]],
            velocity: vec![vel; n],
            valid: vec![true; n],
        }
    }

    #[test]
    fn constant_velocity_profile_is_flat() {
        let frames: Vec<_> = (0..4).map(|e| (e, uniform_frame([0.03, 0.04, 0.0]))).collect();
        let p = speed_profile(&frames, Region::default(), 0.04).unwrap();
        for s in &p.speeds {
            assert!((s.unwrap() - 1.25).abs() < 1e-12);
        }
        assert!(p.to_csv().starts_with("epoch,time_s,speed_mps\n0,0,1.25"));
    }

    #[test]
    fn empty_region_is_missing() {
        let frames = vec![(7, uniform_frame([1.0, 0.0, 0.0]))];
        let r = Region { x0: 100.0, x1: 101.0, y0: 0.0, y1: 1.0 };
        let p = speed_profile(&frames, r, 0.04).unwrap();
        assert_eq!(p.speeds, vec![None]);
        assert!(p.to_csv().ends_with("7,0.28,\n"));
    }

    #[test]
    fn cross_section_bins_and_empty_band() {
        let f = uniform_frame([0.0, 0.04, 0.0]);
        let s = f.speeds(0.04);
        let rows = channel_cross_section(&f, &s, (0, 1), 1.0).unwrap();
        assert_eq!(rows, vec![(0.5, 1.0), (5.5, 1.0)]);
        let mut g = f.clone();
        g.valid = vec![false; 4];
        assert!(channel_cross_section(&g, &s, (0, 0), 1.0).unwrap().is_empty());
        assert!(channel_cross_section(&f, &s, (0, 2), 1.0).is_err());
    }
}
