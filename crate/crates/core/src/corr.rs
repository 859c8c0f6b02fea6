//! Windowed correlation volumes over per-pixel feature vectors.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::raster::Field;

/// Default window side; a search radius of 4 pixels.
pub const DEFAULT_WINDOW: usize = 9;

/// Per-pixel stack of `window^2` feature correlations.
///
/// Channel `k` corresponds to displacement `(k % window - r, k / window - r)`
/// with `r = window / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    window: usize,
    data: Field,
}

impl CorrelationVolume {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn radius(&self) -> usize {
        self.window / 2
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn as_field(&self) -> &Field {
        &self.data
    }

    /// Correlation at pixel `(u, v)` for displacement `(du, dv)`.
    pub fn at(&self, u: usize, v: usize, du: isize, dv: isize) -> f64 {
        let r = self.radius() as isize;
        let k = ((dv + r) * self.window as isize + du + r) as usize;
        self.data.get(u, v, k)
    }

    /// Displacement with the largest correlation at `(u, v)`; ties keep the first.
    pub fn argmax(&self, u: usize, v: usize) -> (isize, isize) {
        let px = self.data.pixel(u, v);
        let mut best = 0;
        for (k, &x) in px.iter().enumerate() {
            if x > px[best] {
                best = k;
            }
        }
        let r = self.radius() as isize;
        let l = self.window as isize;
        ((best as isize) % l - r, (best as isize) / l - r)
    }
}

/// Mean over channels of `f1(p) * f2(p + d)` for every `d` in the centered
/// `window x window` neighbourhood; `f2` is addressed with clamp-to-edge.
pub fn correlation_volume(f1: &Field, f2: &Field, window: usize) -> Result<CorrelationVolume> {
    f1.check_same_dims(f2, "correlation_volume")?;
    if window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd, got {window}")));
    }
    let (w, h, c) = (f1.width(), f1.height(), f1.channels());
    if c == 0 {
        return Err(shape_err("features have no channels"));
    }
    let r = (window / 2) as isize;
    let l2 = window * window;
    let inv_c = 1.0 / c as f64;
    let mut out = Field::zeros(w, h, l2);
    out.data_mut()
        .par_chunks_mut(w * l2)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..w {
                let a = f1.pixel(u, v);
                for dv in -r..=r {
                    let y = clamp_index(v as isize + dv, h);
                    for du in -r..=r {
                        let x = clamp_index(u as isize + du, w);
                        let b = f2.pixel(x, y);
                        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                        let k = ((dv + r) * window as isize + du + r) as usize;
                        row[u * l2 + k] = dot * inv_c;
                    }
                }
            }
        });
    Ok(CorrelationVolume { window, data: out })
}

/// Zero-mean 3x3 neighbourhood of every pixel, nine values per input channel.
pub fn patch_descriptor(image: &Field) -> Field {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = Field::zeros(w, h, 9 * c);
    out.data_mut()
        .par_chunks_mut(w * 9 * c)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..w {
                for ch in 0..c {
                    let mut patch = [0.0; 9];
                    for (k, slot) in patch.iter_mut().enumerate() {
                        let x = clamp_index(u as isize + (k % 3) as isize - 1, w);
                        let y = clamp_index(v as isize + (k / 3) as isize - 1, h);
                        *slot = image.get(x, y, ch);
                    }
                    let mean = patch.iter().sum::<f64>() / 9.0;
                    let base = u * 9 * c + ch * 9;
                    for k in 0..9 {
                        row[base + k] = patch[k] - mean;
                    }
                }
            }
        });
    out
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}
