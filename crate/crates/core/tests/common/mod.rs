//! Brute-force reference implementations and finite-difference helpers.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use surflow_core::geom::{CalibratedRig, SparseRangeMap, Vec3};
use surflow_core::raster::Field;

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Field {
    Field::from_fn(w, h, c, |_, _, _| rng.gen_range(lo..hi))
}

/// Smooth random image in [0, 1] plus a little noise.
pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Field {
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.03..0.12),
            ]
        })
        .collect();
    Field::from_fn(w, h, 1, |u, v, _| {
        let s: f64 = waves.iter().map(|[a, b, p, amp]| amp * (a * u as f64 + b * v as f64 + p).sin()).sum();
        0.5 + s + rng.gen_range(-0.02..0.02)
    })
}

/// Range map with each pixel valid with probability `p`.
pub fn random_range_map(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> SparseRangeMap {
    let mut m = SparseRangeMap::empty(w, h);
    for v in 0..h {
        for u in 0..w {
            if rng.gen_bool(p) {
                m.insert_nearest(u, v, rng.gen_range(5.0..50.0));
            }
        }
    }
    m
}

fn clampf(x: f64, n: usize) -> f64 {
    x.max(0.0).min((n - 1) as f64)
}

/// Clamp-to-edge bilinear interpolation.
pub fn bilinear(f: &Field, u: f64, v: f64, c: usize) -> f64 {
    let (w, h) = (f.width(), f.height());
    let (x, y) = (clampf(u, w), clampf(v, h));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let top = (1.0 - ax) * f.get(x0, y0, c) + ax * f.get(x1, y0, c);
    let bot = (1.0 - ax) * f.get(x0, y1, c) + ax * f.get(x1, y1, c);
    (1.0 - ay) * top + ay * bot
}

pub fn warp(f: &Field, flow: &Field) -> Field {
    Field::from_fn(f.width(), f.height(), f.channels(), |u, v, c| {
        bilinear(f, u as f64 + flow.get(u, v, 0), v as f64 + flow.get(u, v, 1), c)
    })
}

pub fn rmsd(a: &Field, b: &Field) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y) * (x - y);
    }
    (s / a.len() as f64).sqrt()
}

/// Ternary signature: 8 neighbour codes per pixel and channel.
fn census_signature(f: &Field, eps: f64) -> Vec<[i8; 8]> {
    let (w, h) = (f.width() as isize, f.height() as isize);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            for c in 0..f.channels() {
                let center = f.get(u as usize, v as usize, c);
                let mut sig = [0i8; 8];
                let mut k = 0;
                for dv in -1..=1isize {
                    for du in -1..=1isize {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let x = (u + du).clamp(0, w - 1) as usize;
                        let y = (v + dv).clamp(0, h - 1) as usize;
                        let d = f.get(x, y, c) - center;
                        sig[k] = if d >= eps { -1 } else if -d >= eps { 1 } else { 0 };
                        k += 1;
                    }
                }
                out.push(sig);
            }
        }
    }
    out
}

pub fn census(a: &Field, b: &Field, eps: f64) -> f64 {
    let (sa, sb) = (census_signature(a, eps), census_signature(b, eps));
    let miss: usize = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count())
        .sum();
    miss as f64 / (8 * a.len()) as f64
}

/// 3x3 mean over the valid region of a plane stored as rows.
fn pool(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (p.len(), p[0].len());
    (0..h - 2)
        .map(|y| {
            (0..w - 2)
                .map(|x| {
                    let mut s = 0.0;
                    for j in 0..3 {
                        for i in 0..3 {
                            s += p[y + j][x + i];
                        }
                    }
                    s / 9.0
                })
                .collect()
        })
        .collect()
}

fn plane(f: &Field, c: usize) -> Vec<Vec<f64>> {
    (0..f.height()).map(|v| (0..f.width()).map(|u| f.get(u, v, c)).collect()).collect()
}

/// `(1 - mean SSIM) / 2` between pooled images, windowed statistics computed
/// directly from the nine window samples.
pub fn photometric(img_t: &Field, img_t1: &Field, flow: &Field) -> f64 {
    let warped = warp(img_t1, flow);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..img_t.channels() {
        let a = pool(&plane(img_t, c));
        let b = pool(&plane(&warped, c));
        let (h, w) = (a.len(), a[0].len());
        for y in 0..h - 2 {
            for x in 0..w - 2 {
                let mut xs = Vec::with_capacity(9);
                for j in 0..3 {
                    for i in 0..3 {
                        xs.push((a[y + j][x + i], b[y + j][x + i]));
                    }
                }
                let ma = xs.iter().map(|p| p.0).sum::<f64>() / 9.0;
                let mb = xs.iter().map(|p| p.1).sum::<f64>() / 9.0;
                let va = xs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / 9.0;
                let vb = xs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / 9.0;
                let cov = xs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / 9.0;
                sum += (2.0 * ma * mb + C1) * (2.0 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                n += 1;
            }
        }
    }
    0.5 * (1.0 - sum / n as f64)
}

/// Mean of `|O_f(p) + O_b(p + O_f(p))|_1` per component.
pub fn cycle(f: &Field, b: &Field) -> f64 {
    let mut s = 0.0;
    for v in 0..f.height() {
        for u in 0..f.width() {
            let (x, y) = (u as f64 + f.get(u, v, 0), v as f64 + f.get(u, v, 1));
            for c in 0..2 {
                s += (f.get(u, v, c) + bilinear(b, x, y, c)).abs();
            }
        }
    }
    s / (2 * f.num_pixels()) as f64
}

pub fn smoothness(field: &Field, image: &Field, beta: f64) -> f64 {
    let (w, h, c) = (field.width(), field.height(), field.channels());
    let edge = |u0: usize, v0: usize, u1: usize, v1: usize| {
        let g: f64 = (0..image.channels()).map(|k| (image.get(u1, v1, k) - image.get(u0, v0, k)).abs()).sum();
        (-beta * g).exp()
    };
    let mut s = 0.0;
    for v in 0..h {
        for u in 0..w {
            for k in 0..c {
                if u + 1 < w {
                    s += edge(u, v, u + 1, v) * (field.get(u + 1, v, k) - field.get(u, v, k)).abs();
                }
                if v + 1 < h {
                    s += edge(u, v, u, v + 1) * (field.get(u, v + 1, k) - field.get(u, v, k)).abs();
                }
            }
        }
    }
    s / (w * h * c) as f64
}

pub fn depth_l1(depth: &Field, map: &SparseRangeMap) -> f64 {
    let mut s = 0.0;
    for (u, v, z) in map.samples() {
        s += (z - depth.get(u, v, 0)).abs();
    }
    s / depth.num_pixels() as f64
}

pub fn static_l1(a: &Field, b: &Field, mask: &Field) -> f64 {
    let n: f64 = mask.data().iter().sum();
    if n == 0.0 {
        return 0.0;
    }
    let s: f64 = (0..a.len()).map(|i| mask.data()[i] * (b.data()[i] - a.data()[i]).abs()).sum();
    s / n
}

/// Mean over channels of `f1(p) f2(p + d)`, clamp-to-edge, channel order of
/// row-major displacements.
pub fn correlation(f1: &Field, f2: &Field, window: usize) -> Field {
    let r = (window / 2) as isize;
    let (w, h) = (f1.width() as isize, f1.height() as isize);
    Field::from_fn(f1.width(), f1.height(), window * window, |u, v, k| {
        let du = (k % window) as isize - r;
        let dv = (k / window) as isize - r;
        let x = (u as isize + du).clamp(0, w - 1) as usize;
        let y = (v as isize + dv).clamp(0, h - 1) as usize;
        let mut s = 0.0;
        for c in 0..f1.channels() {
            s += f1.get(u, v, c) * f2.get(x, y, c);
        }
        s / f1.channels() as f64
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

/// Compares `analytic` with central differences of `f` at the given
/// coordinates of `x`. Coordinates where the one-sided differences disagree
/// sit on a kink (an L1 tie or a bilinear cell edge) and are skipped.
pub fn fd_check(f: impl Fn(&Field) -> f64, x: &Field, analytic: &Field, coords: &[usize], h: f64) -> FdStats {
    let mut st = FdStats::default();
    let f0 = f(x);
    let mut y = x.clone();
    for &i in coords {
        let orig = y.data()[i];
        y.data_mut()[i] = orig + h;
        let fp = f(&y);
        y.data_mut()[i] = orig - h;
        let fm = f(&y);
        y.data_mut()[i] = orig;
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let central = (fp - fm) / (2.0 * h);
        let scale = fwd.abs().max(bwd.abs()).max(1e-6);
        if (fwd - bwd).abs() > 1e-3 * scale {
            st.skipped += 1;
            continue;
        }
        let a = analytic.data()[i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        st.max_rel = st.max_rel.max((a - central).abs() / denom);
        st.checked += 1;
    }
    st
}

/// `K [R | t]` applied to homogeneous points.
pub fn projection_matrix(rig: &CalibratedRig) -> [[f64; 4]; 3] {
    let (r, t) = (rig.rotation(), rig.translation());
    let (px, py) = rig.principal_point();
    let k = [[rig.fx(), 0.0, px], [0.0, rig.fy(), py], [0.0, 0.0, 1.0]];
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            out[i][j] = (0..3).map(|m| k[i][m] * if j < 3 { r[m][j] } else { t[m] }).sum();
        }
    }
    out
}

/// Nearest depth per rounded pixel by scanning every point for every pixel.
pub fn rasterize_reference(points: &[Vec3], rig: &CalibratedRig) -> Vec<Option<f64>> {
    let p = projection_matrix(rig);
    let (w, h) = (rig.width(), rig.height());
    let projected: Vec<Option<(i64, i64, f64)>> = points
        .iter()
        .map(|x| {
            let hom = [x[0], x[1], x[2], 1.0];
            let c: Vec<f64> = (0..3).map(|i| (0..4).map(|j| p[i][j] * hom[j]).sum()).collect();
            let z = rig.to_camera(x)[2];
            (z > 1e-9).then(|| ((c[0] / c[2]).round() as i64, (c[1] / c[2]).round() as i64, z))
        })
        .collect();
    let mut out = vec![None; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let best = projected
                .iter()
                .flatten()
                .filter(|(a, b, _)| *a == u && *b == v)
                .map(|&(_, _, z)| z)
                .fold(None, |acc: Option<f64>, z| Some(acc.map_or(z, |m| m.min(z))));
            out[v as usize * w + u as usize] = best;
        }
    }
    out
}
