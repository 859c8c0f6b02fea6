//! Edge-aware smoothness, sparse depth supervision, static-scene and cycle
//! consistency terms. All L1 subgradients are zero at ties.
//!
//! Internally each absolute value goes through a Huber penalty of width
//! `eps`; the public functions use `eps = 0`, which is the exact L1.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::geom::SparseRangeMap;
use crate::raster::{bilinear_sample_grad, bilinear_weights, Field};

use super::photometric::ordered_sum;
use super::{JointGradient, TermGradient};

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Huber penalty: `x^2 / (2 eps)` for `|x| <= eps`, else `|x| - eps / 2`.
/// `eps = 0` gives `|x|`.
#[inline]
pub(crate) fn penalty(x: f64, eps: f64) -> f64 {
    let a = x.abs();
    if a <= eps && eps > 0.0 {
        0.5 * x * x / eps
    } else {
        a - 0.5 * eps
    }
}

/// Derivative of [`penalty`]; zero at ties when `eps = 0`.
#[inline]
pub(crate) fn penalty_grad(x: f64, eps: f64) -> f64 {
    if eps > 0.0 && x.abs() <= eps {
        x / eps
    } else {
        sign(x)
    }
}

/// Per-pixel weights `exp(-beta * |grad I|_1)` for forward differences along
/// u and v. The last column (row) has no u (v) difference and holds 0.
#[derive(Debug, Clone)]
pub struct EdgeWeights {
    width: usize,
    height: usize,
    wu: Vec<f64>,
    wv: Vec<f64>,
}

impl EdgeWeights {
    pub fn new(image: &Field, beta: f64) -> Self {
        let (w, h, c) = (image.width(), image.height(), image.channels());
        let mut wu = vec![0.0; w * h];
        let mut wv = vec![0.0; w * h];
        for v in 0..h {
            for u in 0..w {
                let p = image.pixel(u, v);
                if u + 1 < w {
                    let q = image.pixel(u + 1, v);
                    let g: f64 = (0..c).map(|k| (q[k] - p[k]).abs()).sum();
                    wu[v * w + u] = (-beta * g).exp();
                }
                if v + 1 < h {
                    let q = image.pixel(u, v + 1);
                    let g: f64 = (0..c).map(|k| (q[k] - p[k]).abs()).sum();
                    wv[v * w + u] = (-beta * g).exp();
                }
            }
        }
        Self {
            width: w,
            height: h,
            wu,
            wv,
        }
    }

    pub fn evaluate(&self, field: &Field, with_grad: bool) -> Result<(f64, Option<Field>)> {
        self.evaluate_robust(field, 0.0, with_grad)
    }

    pub(crate) fn evaluate_robust(
        &self,
        field: &Field,
        eps: f64,
        with_grad: bool,
    ) -> Result<(f64, Option<Field>)> {
        if field.width() != self.width || field.height() != self.height {
            return Err(shape_err("smoothness: field and image sizes differ"));
        }
        let (w, h, c) = (self.width, self.height, field.channels());
        let norm = 1.0 / (w * h * c) as f64;
        let d = field.data();
        let row_sums: Vec<f64> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut acc = 0.0;
                for u in 0..w {
                    let i = v * w + u;
                    for k in 0..c {
                        let x = d[i * c + k];
                        if u + 1 < w {
                            acc += penalty(d[(i + 1) * c + k] - x, eps) * self.wu[i];
                        }
                        if v + 1 < h {
                            acc += penalty(d[(i + w) * c + k] - x, eps) * self.wv[i];
                        }
                    }
                }
                acc
            })
            .collect();
        let value = row_sums.iter().sum::<f64>() * norm;
        if !with_grad {
            return Ok((value, None));
        }
        let mut grad = Field::zeros(w, h, c);
        grad.data_mut()
            .par_chunks_mut(w * c)
            .enumerate()
            .for_each(|(v, row)| {
                for u in 0..w {
                    let i = v * w + u;
                    for k in 0..c {
                        let x = d[i * c + k];
                        let mut g = 0.0;
                        if u + 1 < w {
                            g -= penalty_grad(d[(i + 1) * c + k] - x, eps) * self.wu[i];
                        }
                        if u > 0 {
                            g += penalty_grad(x - d[(i - 1) * c + k], eps) * self.wu[i - 1];
                        }
                        if v + 1 < h {
                            g -= penalty_grad(d[(i + w) * c + k] - x, eps) * self.wv[i];
                        }
                        if v > 0 {
                            g += penalty_grad(x - d[(i - w) * c + k], eps) * self.wv[i - w];
                        }
                        row[u * c + k] = g * norm;
                    }
                }
            });
        Ok((value, Some(grad)))
    }
}

/// Edge-aware first-order smoothness of `field` guided by `image`.
pub fn smoothness_loss(field: &Field, image: &Field, beta: f64) -> Result<TermGradient> {
    field.check_same_size(image, "smoothness")?;
    let (value, grad) = EdgeWeights::new(image, beta).evaluate(field, true)?;
    Ok(TermGradient {
        value,
        grad: grad.expect("gradient requested"),
    })
}

/// Mean L1 residual between the sparse supervision and the bilinearly sampled
/// dense depth, normalized by the raster size.
pub fn depth_loss(depth: &Field, supervision: &SparseRangeMap) -> Result<TermGradient> {
    let (value, grad) = depth_term(depth, supervision, 0.0, true)?;
    Ok(TermGradient {
        value,
        grad: grad.expect("gradient requested"),
    })
}

pub(crate) fn depth_term(
    depth: &Field,
    supervision: &SparseRangeMap,
    eps: f64,
    with_grad: bool,
) -> Result<(f64, Option<Field>)> {
    let (w, h) = (depth.width(), depth.height());
    if depth.channels() != 1 || supervision.width() != w || supervision.height() != h {
        return Err(shape_err("depth_loss: depth must be single channel and match the range map"));
    }
    let norm = 1.0 / (w * h) as f64;
    let mut grad = with_grad.then(|| Field::zeros(w, h, 1));
    let mut acc = 0.0;
    let mut any = false;
    for (u, v, target) in supervision.samples() {
        any = true;
        let (uf, vf) = (u as f64, v as f64);
        let weights = bilinear_weights(w, h, uf, vf);
        let pred: f64 = weights.iter().map(|&((x, y), wt)| wt * depth.get(x, y, 0)).sum();
        let r = target - pred;
        acc += penalty(r, eps);
        if let Some(g) = grad.as_mut() {
            let s = -penalty_grad(r, eps) * norm;
            for ((x, y), wt) in weights {
                if wt != 0.0 {
                    let i = g.index(x, y, 0);
                    g.data_mut()[i] += s * wt;
                }
            }
        }
    }
    if !any {
        log::warn!("depth supervision has no valid pixels; term is zero");
    }
    Ok((acc * norm, grad))
}

/// Masked mean of `|depth_t1 - depth_t|`; zero for an empty mask.
pub fn static_loss(depth_t: &Field, depth_t1: &Field, mask: &Field) -> Result<JointGradient> {
    static_term(depth_t, depth_t1, mask, 0.0)
}

pub(crate) fn static_term(
    depth_t: &Field,
    depth_t1: &Field,
    mask: &Field,
    eps: f64,
) -> Result<JointGradient> {
    depth_t.check_same_dims(depth_t1, "static_loss depths")?;
    depth_t.check_same_dims(mask, "static_loss mask")?;
    let count: f64 = mask.data().iter().sum();
    let (w, h) = (depth_t.width(), depth_t.height());
    if count <= 0.0 {
        return Ok(JointGradient {
            value: 0.0,
            first: Field::zeros(w, h, 1),
            second: Field::zeros(w, h, 1),
        });
    }
    let (a, b, m) = (depth_t.data(), depth_t1.data(), mask.data());
    let terms: Vec<f64> = (0..a.len()).map(|i| m[i] * penalty(b[i] - a[i], eps)).collect();
    let value = ordered_sum(&terms, w) / count;
    let second: Vec<f64> = (0..a.len()).map(|i| m[i] * penalty_grad(b[i] - a[i], eps) / count).collect();
    let first: Vec<f64> = second.iter().map(|x| -x).collect();
    Ok(JointGradient {
        value,
        first: Field::from_vec(w, h, 1, first)?,
        second: Field::from_vec(w, h, 1, second)?,
    })
}

/// Forward-backward consistency `mean |O_f(p) + O_b(p + O_f(p))|_1`.
pub fn cycle_loss(flow_fwd: &Field, flow_bwd: &Field) -> Result<JointGradient> {
    let (value, grads) = cycle_term(flow_fwd, flow_bwd, 0.0, true)?;
    let (first, second) = grads.expect("gradient requested");
    Ok(JointGradient {
        value,
        first,
        second,
    })
}

pub(crate) fn cycle_term(
    flow_fwd: &Field,
    flow_bwd: &Field,
    eps: f64,
    with_grad: bool,
) -> Result<(f64, Option<(Field, Field)>)> {
    flow_fwd.check_same_dims(flow_bwd, "cycle_loss")?;
    if flow_fwd.channels() != 2 {
        return Err(shape_err("cycle_loss: flows must have 2 channels"));
    }
    let (w, h) = (flow_fwd.width(), flow_fwd.height());
    let norm = 1.0 / (w * h * 2) as f64;
    // Residual and partials of the warped backward flow per pixel.
    let mut res = vec![0.0; w * h * 2];
    let mut du = vec![0.0; w * h * 2];
    let mut dv = vec![0.0; w * h * 2];
    res.par_chunks_mut(2 * w)
        .zip(du.par_chunks_mut(2 * w))
        .zip(dv.par_chunks_mut(2 * w))
        .enumerate()
        .for_each(|(v, ((r, gu), gv))| {
            for u in 0..w {
                let f = flow_fwd.pixel(u, v);
                let s = 2 * u..2 * u + 2;
                bilinear_sample_grad(
                    flow_bwd,
                    u as f64 + f[0],
                    v as f64 + f[1],
                    &mut r[s.clone()],
                    &mut gu[s.clone()],
                    &mut gv[s],
                );
                r[2 * u] += f[0];
                r[2 * u + 1] += f[1];
            }
        });
    let abs: Vec<f64> = res.iter().map(|&x| penalty(x, eps)).collect();
    let value = ordered_sum(&abs, 2 * w) * norm;
    if !with_grad {
        return Ok((value, None));
    }
    let mut gf = Field::zeros(w, h, 2);
    let mut gb = Field::zeros(w, h, 2);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let s = [
                penalty_grad(res[2 * i], eps) * norm,
                penalty_grad(res[2 * i + 1], eps) * norm,
            ];
            let g = gf.pixel_mut(u, v);
            g[0] = s[0] + s[0] * du[2 * i] + s[1] * du[2 * i + 1];
            g[1] = s[1] + s[0] * dv[2 * i] + s[1] * dv[2 * i + 1];
            let f = flow_fwd.pixel(u, v);
            for ((x, y), wt) in bilinear_weights(w, h, u as f64 + f[0], v as f64 + f[1]) {
                if wt != 0.0 {
                    let b = gb.pixel_mut(x, y);
                    b[0] += s[0] * wt;
                    b[1] += s[1] * wt;
                }
            }
        }
    }
    Ok((value, Some((gf, gb))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_smooth() {
        let img = Field::from_fn(6, 5, 1, |u, v, _| (u * v) as f64 * 0.1);
        let t = smoothness_loss(&Field::filled(6, 5, 2, 3.0), &img, 10.0).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ramp_value_counts_forward_differences() {
        let (w, h, s) = (7, 5, 0.3);
        let img = Field::filled(w, h, 1, 0.5);
        let ramp = Field::from_fn(w, h, 1, |u, _, _| s * u as f64);
        let t = smoothness_loss(&ramp, &img, 10.0).unwrap();
        let want = s * ((w - 1) * h) as f64 / (w * h) as f64;
        assert!((t.value - want).abs() < 1e-14);
        // Slope along both axes doubles the count of sloped axes.
        let both = Field::from_fn(w, h, 1, |u, v, _| s * (u + v) as f64);
        let t = smoothness_loss(&both, &img, 10.0).unwrap();
        let want = s * ((w - 1) * h + w * (h - 1)) as f64 / (w * h) as f64;
        assert!((t.value - want).abs() < 1e-14);
    }

    #[test]
    fn depth_examples() {
        let mut sup = SparseRangeMap::empty(6, 4);
        sup.insert_nearest(1, 1, 12.0);
        sup.insert_nearest(4, 2, 20.0);
        sup.insert_nearest(5, 3, 30.0);
        let mut d = Field::filled(6, 4, 1, 15.0);
        d.set(1, 1, 0, 12.0);
        d.set(4, 2, 0, 20.0);
        d.set(5, 3, 0, 30.0);
        assert_eq!(depth_loss(&d, &sup).unwrap().value, 0.0);
        let t = depth_loss(&d.map(|x| x + 0.25), &sup).unwrap();
        assert!((t.value - 0.25 * 3.0 / 24.0).abs() < 1e-15);
        let empty = depth_loss(&d, &SparseRangeMap::empty(6, 4)).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn static_examples() {
        let d = Field::filled(4, 4, 1, 10.0);
        let mut mask = Field::zeros(4, 4, 1);
        for u in 0..4 {
            mask.set(u, 0, 0, 1.0);
        }
        assert_eq!(static_loss(&d, &d, &mask).unwrap().value, 0.0);
        let shifted = d.map(|x| x + 0.7);
        assert!((static_loss(&d, &shifted, &mask).unwrap().value - 0.7).abs() < 1e-14);
        let z = static_loss(&d, &shifted, &Field::zeros(4, 4, 1)).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.first.data().iter().chain(z.second.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn cycle_examples() {
        let z = Field::zeros(8, 8, 2);
        assert_eq!(cycle_loss(&z, &z).unwrap().value, 0.0);
        let f = Field::from_fn(8, 8, 2, |_, _, c| if c == 0 { 1.5 } else { 0.0 });
        let b = f.map(|x| -x);
        assert_eq!(cycle_loss(&f, &b).unwrap().value, 0.0);
    }
}
