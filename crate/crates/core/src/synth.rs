//! Synthetic camera and LiDAR sequences with exact ground truth.
//!
//! The surface is a static tilted plane whose inverse depth is affine in the
//! image row, seen by a camera looking along the LiDAR `y` axis. A smooth
//! band-limited texture is advected across the image: frame `t` shows
//! `T(u - s(u) c_x(t), v - s(u) c_y(t))` where `c(t)` accumulates the
//! per-frame displacement schedule and `s(u)` is the column profile (1 for
//! uniform motion, a parabola for a channel, 0 on static banks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CalibratedRig, Mat3, PointCloud};
use crate::kinematics::{lift_to_scene_flow, speed_profile, Region, DEFAULT_FRAME_INTERVAL};
use crate::raster::Field;

/// Camera looking along LiDAR +y, with LiDAR z up and camera y down.
pub const LIDAR_TO_CAMERA: Mat3 = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Uniform,
    /// Speed falls off as `1 - x^2` across the moving columns.
    Parabolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub focal: f64,
    /// Depth at the top row, meters.
    pub far: f64,
    /// Depth at the bottom row, meters.
    pub near: f64,
    /// Pixel displacement per frame interval. One entry means constant
    /// motion; otherwise one entry per consecutive pair.
    pub velocities: Vec<[f64; 2]>,
    pub profile: Profile,
    /// Static columns on each side of the image.
    pub bank_width: usize,
    /// LiDAR returns per sweep.
    pub lidar_points: usize,
    pub image_noise: f64,
    pub depth_noise: f64,
    pub frame_interval: f64,
    pub region: Region,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 160,
            frames: 2,
            seed: 1,
            focal: 200.0,
            far: 50.0,
            near: 10.0,
            velocities: vec![[3.0, -2.0]],
            profile: Profile::Uniform,
            bank_width: 0,
            lidar_points: 4000,
            image_noise: 0.0,
            depth_noise: 0.0,
            frame_interval: DEFAULT_FRAME_INTERVAL,
            region: Region::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("scene {}x{} is too small", self.width, self.height));
        }
        if self.frames < 1 {
            return bad("scene needs at least one frame".into());
        }
        if !(self.near > 0.0 && self.far >= self.near && self.far <= 100.0) {
            return bad(format!("depth range [{}, {}] must lie in (0, 100]", self.near, self.far));
        }
        if !(self.focal > 0.0) || !(self.frame_interval > 0.0) {
            return bad("focal length and frame interval must be positive".into());
        }
        if self.image_noise < 0.0 || self.depth_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let pairs = self.frames - 1;
        if !(self.velocities.len() == 1 || self.velocities.len() == pairs) {
            return bad(format!(
                "{} velocities given for {} frame pairs",
                self.velocities.len(),
                pairs
            ));
        }
        for v in &self.velocities {
            if !v.iter().all(|x| x.is_finite() && x.abs() <= 16.0) {
                return bad(format!("displacement {v:?} exceeds 16 px per frame"));
            }
            if self.profile == Profile::Parabolic && v[0] != 0.0 {
                return bad("a parabolic profile only supports motion along image columns".into());
            }
        }
        if 2 * self.bank_width >= self.width {
            return bad("banks cover the whole image".into());
        }
        if self.lidar_points > self.width * self.height {
            return bad("more LiDAR points than pixels".into());
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<CalibratedRig> {
        CalibratedRig::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            LIDAR_TO_CAMERA,
            [0.0; 3],
            self.width,
            self.height,
        )
    }

    /// Displacement from frame `t` to `t + 1`.
    pub fn velocity(&self, t: usize) -> [f64; 2] {
        if self.velocities.len() == 1 {
            self.velocities[0]
        } else {
            self.velocities[t]
        }
    }

    /// Column profile `s(u)`.
    pub fn profile_at(&self, u: usize) -> f64 {
        let (b, w) = (self.bank_width, self.width);
        if u < b || u >= w - b {
            return 0.0;
        }
        match self.profile {
            Profile::Uniform => 1.0,
            Profile::Parabolic => {
                let half = (w - 2 * b) as f64 / 2.0;
                let x = (u as f64 + 0.5 - b as f64 - half) / half;
                (1.0 - x * x).max(0.0)
            }
        }
    }

    /// Camera depth of row `v`: inverse depth is affine in `v`, which makes
    /// the surface a plane.
    pub fn depth_at(&self, v: f64) -> f64 {
        let s = v / (self.height - 1) as f64;
        1.0 / ((1.0 - s) / self.far + s / self.near)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub rig: CalibratedRig,
    /// Grayscale frames in [0, 1].
    pub images: Vec<Field>,
    pub clouds: Vec<PointCloud>,
    /// Flow from frame `t` to `t + 1`.
    pub gt_flow: Vec<Field>,
    /// Flow from frame `t + 1` back to `t`.
    pub gt_flow_bwd: Vec<Field>,
    /// Camera depth; the surface is static so it is shared by every frame.
    pub gt_depth: Field,
    /// Mean speed in the region per pair, m/s.
    pub gt_speeds: Vec<Option<f64>>,
}

/// Band-limited texture: a sum of random plane waves.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = 24;
        let waves = (0..n)
            .map(|k| {
                // Periods from 64 px down to 8 px, spread evenly on a log scale.
                let period = 64.0 * (8.0f64 / 64.0).powf(k as f64 / (n - 1) as f64);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = 0.4 / n as f64 * 2.0 * rng.gen_range(0.5..1.0);
                let f = std::f64::consts::TAU / period;
                (f * angle.cos(), f * angle.sin(), phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum();
        (0.5 + s).clamp(0.0, 1.0)
    }
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let rig = spec.rig()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = Texture::new(&mut rng);

    let mut offsets = vec![[0.0f64; 2]];
    for t in 0..spec.frames - 1 {
        let (c, d) = (offsets[t], spec.velocity(t));
        offsets.push([c[0] + d[0], c[1] + d[1]]);
    }
    let prof: Vec<f64> = (0..w).map(|u| spec.profile_at(u)).collect();

    let image_noise = (spec.image_noise > 0.0)
        .then(|| Normal::new(0.0, spec.image_noise).expect("finite sigma"));
    let images = offsets
        .iter()
        .map(|c| {
            let mut img = Field::from_fn(w, h, 1, |u, v, _| {
                let s = prof[u];
                texture.at(u as f64 - s * c[0], v as f64 - s * c[1])
            });
            if let Some(n) = &image_noise {
                for x in img.data_mut() {
                    *x = (*x + n.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            img
        })
        .collect();

    let gt_depth = Field::from_fn(w, h, 1, |_, v, _| spec.depth_at(v as f64));
    let depth_noise = (spec.depth_noise > 0.0)
        .then(|| Normal::new(0.0, spec.depth_noise).expect("finite sigma"));
    let mut clouds = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut picks = rand::seq::index::sample(&mut rng, w * h, spec.lidar_points).into_vec();
        picks.sort_unstable();
        let points = picks
            .into_iter()
            .map(|i| {
                let (u, v) = (i % w, i / w);
                let mut z = gt_depth.get(u, v, 0);
                if let Some(n) = &depth_noise {
                    z = (z + n.sample(&mut rng)).max(1e-3);
                }
                rig.back_project(u as f64, v as f64, z)
            })
            .collect::<Result<Vec<_>>>()?;
        clouds.push(PointCloud::new(points, t as u64)?);
    }

    let flow_field = |d: [f64; 2], sign: f64| {
        Field::from_fn(w, h, 2, |u, _, c| sign * prof[u] * d[c])
    };
    let gt_flow: Vec<Field> = (0..spec.frames - 1).map(|t| flow_field(spec.velocity(t), 1.0)).collect();
    let gt_flow_bwd = (0..spec.frames - 1).map(|t| flow_field(spec.velocity(t), -1.0)).collect();

    let lifted = gt_flow
        .iter()
        .enumerate()
        .map(|(t, f)| Ok((t as u64, lift_to_scene_flow(f, &gt_depth, &gt_depth, &rig)?)))
        .collect::<Result<Vec<_>>>()?;
    let gt_speeds = if lifted.is_empty() {
        Vec::new()
    } else {
        speed_profile(&lifted, spec.region, spec.frame_interval)?.speeds
    };

    Ok(SyntheticScene {
        spec: spec.clone(),
        rig,
        images,
        clouds,
        gt_flow,
        gt_flow_bwd,
        gt_depth,
        gt_speeds,
    })
}
