//! SSIM photometric term between a frame and the warped next frame.
//!
//! Both images pass through 3x3 average pooling (valid region) and SSIM is
//! evaluated over 3x3 windows of the pooled images, again over the valid
//! region. The term is `(1 - mean SSIM) / 2`.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::raster::{bilinear_sample_grad, Field};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-frame quantities of the reference image that do not depend on the flow.
#[derive(Debug, Clone)]
pub struct PhotometricTarget {
    width: usize,
    height: usize,
    channels: Vec<TargetChannel>,
}

#[derive(Debug, Clone)]
struct TargetChannel {
    pooled: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PhotometricTarget {
    pub fn new(image: &Field) -> Self {
        let (w, h) = (image.width(), image.height());
        let channels = if degenerate(w, h) {
            Vec::new()
        } else {
            (0..image.channels())
                .map(|c| {
                    let plane = image.channel(c).into_vec();
                    let pooled = box_mean(&plane, w, h);
                    let (pw, ph) = (w - 2, h - 2);
                    let mean = box_mean(&pooled, pw, ph);
                    let sq: Vec<f64> = pooled.iter().map(|x| x * x).collect();
                    let var = box_mean(&sq, pw, ph)
                        .iter()
                        .zip(&mean)
                        .map(|(e2, m)| e2 - m * m)
                        .collect();
                    TargetChannel { pooled, mean, var }
                })
                .collect()
        };
        Self {
            width: w,
            height: h,
            channels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Term value and, when requested, its gradient w.r.t. `flow`.
    pub fn evaluate(&self, next: &Field, flow: &Field, with_grad: bool) -> Result<(f64, Option<Field>)> {
        if next.width() != self.width || next.height() != self.height {
            return Err(shape_err(format!(
                "photometric: target is {}x{}, image is {}x{}",
                self.width,
                self.height,
                next.width(),
                next.height()
            )));
        }
        next.check_same_size(flow, "photometric flow")?;
        if flow.channels() != 2 {
            return Err(shape_err("photometric: flow must have 2 channels"));
        }
        if self.channels.is_empty() {
            let grad = with_grad.then(|| Field::zeros(self.width, self.height, 2));
            return Ok((0.0, grad));
        }
        if next.channels() != self.channels.len() {
            return Err(shape_err("photometric: channel count differs from target"));
        }
        let (w, h) = (self.width, self.height);
        let nc = self.channels.len();
        let (warped, dwu, dwv) = warp_with_grad(next, flow);

        let (pw, ph) = (w - 2, h - 2);
        let (mw, mh) = (w - 4, h - 4);
        let norm = 1.0 / (mw * mh * nc) as f64;
        let mut ssim_sum = 0.0;
        let mut grad = with_grad.then(|| Field::zeros(w, h, 2));

        for (c, tgt) in self.channels.iter().enumerate() {
            let plane: Vec<f64> = warped.iter().skip(c).step_by(nc).copied().collect();
            let b = box_mean(&plane, w, h);
            let mean_b = box_mean(&b, pw, ph);
            let sq: Vec<f64> = b.iter().map(|x| x * x).collect();
            let e_b2 = box_mean(&sq, pw, ph);
            let ab: Vec<f64> = b.iter().zip(&tgt.pooled).map(|(x, y)| x * y).collect();
            let e_ab = box_mean(&ab, pw, ph);

            // SSIM per window and its partials w.r.t. (mean_b, cov_ab, var_b),
            // already scaled by d(term)/d(ssim) = -norm / 2.
            let scale = -0.5 * norm;
            let mut s_map = vec![0.0; mw * mh];
            let (mut p_map, mut g_map, mut d_map) = if with_grad {
                (vec![0.0; mw * mh], vec![0.0; mw * mh], vec![0.0; mw * mh])
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            for i in 0..mw * mh {
                let (ma, mb) = (tgt.mean[i], mean_b[i]);
                let va = tgt.var[i];
                let vb = e_b2[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                let a1 = 2.0 * ma * mb + SSIM_C1;
                let a2 = 2.0 * cov + SSIM_C2;
                let b1 = ma * ma + mb * mb + SSIM_C1;
                let b2 = va + vb + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                s_map[i] = s;
                if with_grad {
                    let d_mean = 2.0 * ma * a2 / (b1 * b2) - s * 2.0 * mb / b1;
                    let d_cov = 2.0 * a1 / (b1 * b2);
                    let d_var = -s / b2;
                    let (al, ga, de) = (scale * d_mean, scale * d_cov, scale * d_var);
                    p_map[i] = al - ga * ma - 2.0 * de * mb;
                    g_map[i] = ga;
                    d_map[i] = de;
                }
            }
            ssim_sum += ordered_sum(&s_map, mw);

            if let Some(grad) = grad.as_mut() {
                let ap = box_sum_adjoint(&p_map, mw, mh);
                let ag = box_sum_adjoint(&g_map, mw, mh);
                let ad = box_sum_adjoint(&d_map, mw, mh);
                let grad_b: Vec<f64> = (0..pw * ph)
                    .map(|j| (ap[j] + tgt.pooled[j] * ag[j] + 2.0 * b[j] * ad[j]) / 9.0)
                    .collect();
                let grad_w: Vec<f64> = box_sum_adjoint(&grad_b, pw, ph)
                    .into_iter()
                    .map(|x| x / 9.0)
                    .collect();
                let g = grad.data_mut();
                for j in 0..w * h {
                    g[2 * j] += grad_w[j] * dwu[j * nc + c];
                    g[2 * j + 1] += grad_w[j] * dwv[j * nc + c];
                }
            }
        }
        let value = 0.5 * (1.0 - ssim_sum * norm);
        Ok((value, grad))
    }
}

/// `(1 - mean SSIM(pool(image_t), pool(warp(image_t1, flow)))) / 2` and its
/// gradient with respect to `flow`.
pub fn photometric_loss(image_t: &Field, image_t1: &Field, flow: &Field) -> Result<super::TermGradient> {
    image_t.check_same_dims(image_t1, "photometric images")?;
    let (value, grad) = PhotometricTarget::new(image_t).evaluate(image_t1, flow, true)?;
    Ok(super::TermGradient {
        value,
        grad: grad.expect("gradient requested"),
    })
}

/// Too small for a pooled 3x3 SSIM window; the term is identically zero.
fn degenerate(w: usize, h: usize) -> bool {
    w < 5 || h < 5
}

fn warp_with_grad(image: &Field, flow: &Field) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, c) = (image.width(), image.channels());
    let n = image.len();
    let (mut out, mut du, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    out.par_chunks_mut(w * c)
        .zip(du.par_chunks_mut(w * c))
        .zip(dv.par_chunks_mut(w * c))
        .enumerate()
        .for_each(|(v, ((o, gu), gv))| {
            for u in 0..w {
                let f = flow.pixel(u, v);
                let r = u * c..(u + 1) * c;
                bilinear_sample_grad(
                    image,
                    u as f64 + f[0],
                    v as f64 + f[1],
                    &mut o[r.clone()],
                    &mut gu[r.clone()],
                    &mut gv[r],
                );
            }
        });
    (out, du, dv)
}

/// Sum of a row-major buffer, accumulated per row then across rows in order.
pub(crate) fn ordered_sum(values: &[f64], width: usize) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let rows: Vec<f64> = values
        .par_chunks(width)
        .map(|r| r.iter().sum::<f64>())
        .collect();
    rows.iter().sum()
}

/// 3x3 mean over the valid region: `(w-2) x (h-2)` output.
pub(crate) fn box_mean(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (ow, oh) = (w - 2, h - 2);
    let mut horiz = vec![0.0; ow * h];
    horiz.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            row[x] = s[x] + s[x + 1] + s[x + 2];
        }
    });
    let mut out = vec![0.0; ow * oh];
    out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        let (r0, r1, r2) = (
            &horiz[y * ow..(y + 1) * ow],
            &horiz[(y + 1) * ow..(y + 2) * ow],
            &horiz[(y + 2) * ow..(y + 3) * ow],
        );
        for x in 0..ow {
            row[x] = (r0[x] + r1[x] + r2[x]) / 9.0;
        }
    });
    out
}

/// Adjoint of the valid 3x3 box sum: spreads a `w x h` buffer onto
/// `(w+2) x (h+2)`.
pub(crate) fn box_sum_adjoint(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (ow, oh) = (w + 2, h + 2);
    let mut horiz = vec![0.0; ow * h];
    horiz.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let lo = x.saturating_sub(2);
            let hi = x.min(w - 1);
            let mut acc = 0.0;
            for xi in lo..=hi {
                acc += s[xi];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; ow * oh];
    out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        let lo = y.saturating_sub(2);
        let hi = y.min(h - 1);
        for yi in lo..=hi {
            let hr = &horiz[yi * ow..(yi + 1) * ow];
            for (o, x) in row.iter_mut().zip(hr) {
                *o += x;
            }
        }
    });
    out
}
