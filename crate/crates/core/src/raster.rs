//! Dense rasters, bilinear sampling, backward warping and box pyramids.
//!
//! Pixel positions are `(u, v)` with `u` the column and `v` the row. Sampling
//! outside the raster clamps the position to the domain edge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Row-major `height x width x channels` raster of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(shape_err(format!(
                "buffer of length {} cannot hold {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(u, v, c)` at every element.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for v in 0..height {
            for u in 0..width {
                for c in 0..channels {
                    data.push(f(u, v, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize, c: usize) -> usize {
        (v * self.width + u) * self.channels + c
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[self.index(u, v, c)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: usize, value: f64) {
        let i = self.index(u, v, c);
        self.data[i] = value;
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = self.index(u, v, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = self.index(u, v, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_dims(&self, other: &Field) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_size(&self, other: &Field) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_size(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Single channel view of channel `c`.
    pub fn channel(&self, c: usize) -> Field {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Field {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Channel mean, used as the grayscale conversion for color images.
    pub fn to_gray(&self) -> Field {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        Field {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Sub-rectangle starting at `(u0, v0)`.
    pub fn crop(&self, u0: usize, v0: usize, width: usize, height: usize) -> Result<Field> {
        if u0 + width > self.width || v0 + height > self.height {
            return Err(shape_err(format!(
                "crop {width}x{height}+{u0}+{v0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(width * height * self.channels);
        for v in v0..v0 + height {
            let a = self.index(u0, v, 0);
            out.extend_from_slice(&self.data[a..a + width * self.channels]);
        }
        Field::from_vec(width, height, self.channels, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self + alpha * other`, elementwise.
    pub fn axpy(&self, alpha: f64, other: &Field) -> Result<Field> {
        self.check_same_dims(other, "axpy")?;
        Ok(Field {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }
}

/// Bilinear sample of all channels at `(u, v)`, written into `out`.
pub fn bilinear_sample_into(field: &Field, u: f64, v: f64, out: &mut [f64]) {
    let s = Stencil::new(field.width, field.height, u, v);
    let c = field.channels;
    if s.fx == 0.0 && s.fy == 0.0 {
        let i = field.index(s.x0, s.y0, 0);
        out[..c].copy_from_slice(&field.data[i..i + c]);
        return;
    }
    let i00 = field.index(s.x0, s.y0, 0);
    let i10 = field.index(s.x1, s.y0, 0);
    let i01 = field.index(s.x0, s.y1, 0);
    let i11 = field.index(s.x1, s.y1, 0);
    let [w00, w10, w01, w11] = s.weights();
    let d = &field.data;
    for k in 0..c {
        out[k] = w00 * d[i00 + k] + w10 * d[i10 + k] + w01 * d[i01 + k] + w11 * d[i11 + k];
    }
}

/// Bilinear sample with clamp-to-edge addressing.
pub fn bilinear_sample(field: &Field, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; field.channels];
    bilinear_sample_into(field, u, v, &mut out);
    out
}

/// Sample plus its partial derivatives with respect to `u` and `v`.
///
/// The derivative along an axis is zero when the position is clamped on that
/// axis.
pub fn bilinear_sample_grad(
    field: &Field,
    u: f64,
    v: f64,
    out: &mut [f64],
    du: &mut [f64],
    dv: &mut [f64],
) {
    let s = Stencil::new(field.width, field.height, u, v);
    let i00 = field.index(s.x0, s.y0, 0);
    let i10 = field.index(s.x1, s.y0, 0);
    let i01 = field.index(s.x0, s.y1, 0);
    let i11 = field.index(s.x1, s.y1, 0);
    let [w00, w10, w01, w11] = s.weights();
    let d = &field.data;
    let gu = if s.grad_u { 1.0 } else { 0.0 };
    let gv = if s.grad_v { 1.0 } else { 0.0 };
    for k in 0..field.channels {
        let (a, b, c, e) = (d[i00 + k], d[i10 + k], d[i01 + k], d[i11 + k]);
        out[k] = w00 * a + w10 * b + w01 * c + w11 * e;
        du[k] = gu * ((1.0 - s.fy) * (b - a) + s.fy * (e - c));
        dv[k] = gv * ((1.0 - s.fx) * (c - a) + s.fx * (e - b));
    }
}

/// The four pixel neighbours `(u, v)` and their weights for a bilinear sample.
pub fn bilinear_weights(width: usize, height: usize, u: f64, v: f64) -> [((usize, usize), f64); 4] {
    let s = Stencil::new(width, height, u, v);
    let [w00, w10, w01, w11] = s.weights();
    [
        ((s.x0, s.y0), w00),
        ((s.x1, s.y0), w10),
        ((s.x0, s.y1), w01),
        ((s.x1, s.y1), w11),
    ]
}

#[derive(Debug, Clone, Copy)]
struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    grad_u: bool,
    grad_v: bool,
}

impl Stencil {
    #[inline]
    fn new(width: usize, height: usize, u: f64, v: f64) -> Self {
        let (x0, x1, fx, grad_u) = axis(width, u);
        let (y0, y1, fy, grad_v) = axis(height, v);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            grad_u,
            grad_v,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }
}

#[inline]
fn axis(n: usize, x: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = x >= 0.0 && x <= max;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, max) };
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x0 + 1, x - x0 as f64, inside)
}

/// Backward warp: `out(p) = field(p + flow(p))` sampled bilinearly.
pub fn backward_warp(field: &Field, flow: &Field) -> Result<Field> {
    field.check_same_size(flow, "backward_warp")?;
    if flow.channels != 2 {
        return Err(shape_err(format!("flow must have 2 channels, got {}", flow.channels)));
    }
    let (w, c) = (field.width, field.channels);
    let mut out = Field::zeros(field.width, field.height, c);
    out.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..w {
                let f = flow.pixel(u, v);
                bilinear_sample_into(
                    field,
                    u as f64 + f[0],
                    v as f64 + f[1],
                    &mut row[u * c..(u + 1) * c],
                );
            }
        });
    Ok(out)
}

/// 2x2 box-mean downsample. Dimensions must be even.
pub fn downsample_box(field: &Field) -> Result<Field> {
    if field.width % 2 != 0 || field.height % 2 != 0 {
        return Err(shape_err(format!(
            "cannot halve {}x{}",
            field.width, field.height
        )));
    }
    let (w, h, c) = (field.width / 2, field.height / 2, field.channels);
    let mut out = Field::zeros(w, h, c);
    out.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..w {
                for k in 0..c {
                    let s = field.get(2 * u, 2 * v, k)
                        + field.get(2 * u + 1, 2 * v, k)
                        + field.get(2 * u, 2 * v + 1, k)
                        + field.get(2 * u + 1, 2 * v + 1, k);
                    row[u * c + k] = 0.25 * s;
                }
            }
        });
    Ok(out)
}

/// Bilinear 2x upsample; fine pixel `x` samples coarse coordinate `x/2 - 1/4`.
/// Values are multiplied by `scale`.
pub fn upsample_bilinear(field: &Field, scale: f64) -> Field {
    let (w, h, c) = (field.width * 2, field.height * 2, field.channels);
    let mut out = Field::zeros(w, h, c);
    out.data
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(v, row)| {
            let cv = v as f64 * 0.5 - 0.25;
            for u in 0..w {
                let cu = u as f64 * 0.5 - 0.25;
                let px = &mut row[u * c..(u + 1) * c];
                bilinear_sample_into(field, cu, cv, px);
                if scale != 1.0 {
                    px.iter_mut().for_each(|x| *x *= scale);
                }
            }
        });
    out
}

/// Coarse-to-fine transfer of a flow field: 2x upsampling, values doubled.
pub fn upsample_flow(flow: &Field) -> Field {
    upsample_bilinear(flow, 2.0)
}

/// Box-mean pyramid; level 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Field>,
}

impl Pyramid {
    pub fn level(&self, k: usize) -> &Field {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> &Field {
        self.levels.last().expect("pyramid has at least one level")
    }
}

pub fn build_pyramid(field: &Field, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(shape_err("pyramid needs at least one level"));
    }
    let div = 1usize << (levels - 1);
    if field.width % div != 0 || field.height % div != 0 {
        return Err(shape_err(format!(
            "{}x{} is not divisible by {div} for {levels} levels",
            field.width, field.height
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(field.clone());
    for _ in 1..levels {
        let next = downsample_box(out.last().unwrap())?;
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}
