//! Coarse-to-fine minimization of the pair energy over bidirectional flow and
//! the two depth fields.
//!
//! For a fixed static mask the energy separates into a flow part and a depth
//! part, so each block takes its own preconditioned gradient step with a
//! global step length that is halved until the block energy decreases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyInputs, EnergyModel, EnergyReport, LossWeights, PairState};
use crate::error::{Error, Result};
use crate::geom::{downsample_cloud, rasterize_range_map, CalibratedRig, PointCloud, SparseRangeMap};
use crate::raster::{build_pyramid, downsample_box, upsample_bilinear, upsample_flow, Field};

/// Smallest depth the optimizer may produce, meters.
const MIN_DEPTH: f64 = 1e-3;

/// Largest gradient entry still treated as a stationary start.
const STATIONARY_GRAD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Largest per-pixel flow update, pixels.
    pub init_step_flow: f64,
    /// Largest per-pixel depth update, meters.
    pub init_step_depth: f64,
    pub step_halvings_max: u32,
    /// Binomial filter passes applied to the gradient before stepping.
    pub direction_smoothing: usize,
    /// Huber width replacing the absolute value in flow terms while
    /// optimizing, pixels. Zero optimizes the exact L1 energy.
    pub huber_flow: f64,
    /// Same for depth terms at full resolution, meters; doubled per coarser
    /// level.
    pub huber_depth: f64,
    /// Static threshold on flow magnitude at full resolution, pixels.
    pub eps_static: f64,
    /// Fraction of each LiDAR sweep fed to the optimizer.
    pub eta: f64,
    pub seed: u64,
    /// Inner iterations between static-mask updates.
    pub mask_interval: usize,
    /// Share of the coarsest level run without the static and cycle terms.
    pub warmup_fraction: f64,
    pub weights: LossWeights,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            iters_per_level: 200,
            init_step_flow: 0.5,
            init_step_depth: 0.05,
            step_halvings_max: 20,
            direction_smoothing: 16,
            huber_flow: 0.02,
            huber_depth: 0.02,
            eps_static: 0.5,
            eta: 0.5,
            seed: 0,
            mask_interval: 10,
            warmup_fraction: 0.25,
            weights: LossWeights::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if self.iters_per_level < 1 {
            return bad("iters_per_level must be at least 1");
        }
        if !(self.eps_static > 0.0) {
            return bad("eps_static must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.init_step_flow > 0.0 && self.init_step_depth > 0.0) {
            return bad("initial steps must be positive");
        }
        if !(self.huber_flow >= 0.0 && self.huber_depth >= 0.0) {
            return bad("Huber widths must be non-negative");
        }
        if self.mask_interval < 1 {
            return bad("mask_interval must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        self.weights.validate()
    }

    /// Seed for the LiDAR subsample of a given epoch.
    pub fn cloud_seed(&self, epoch: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }
}

/// Total energy after an accepted iteration. `segment` changes whenever the
/// objective changes (new level, new mask, warm-up end).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub level: usize,
    pub segment: usize,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub flow_fwd: Field,
    pub flow_bwd: Field,
    pub depth_t: Field,
    pub depth_t1: Field,
    /// 1 for static pixels.
    pub mask: Field,
    pub report: EnergyReport,
    pub energy_trace: Vec<TracePoint>,
}

/// Binary mask, 1 where `||flow|| < eps`.
pub fn motion_segment(flow: &Field, eps: f64) -> Field {
    let data = flow
        .data()
        .chunks_exact(2)
        .map(|f| if (f[0] * f[0] + f[1] * f[1]).sqrt() < eps { 1.0 } else { 0.0 })
        .collect();
    Field::from_vec(flow.width(), flow.height(), 1, data).expect("mask size")
}

/// Static where both the forward and backward flow are below `eps`.
fn joint_mask(fwd: &Field, bwd: &Field, eps: f64) -> Field {
    let a = motion_segment(fwd, eps);
    let b = motion_segment(bwd, eps);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Field::from_vec(a.width(), a.height(), 1, data).expect("mask size")
}

/// Exact Euclidean nearest-valid-pixel fill. Ties go to the first valid pixel
/// in row-major order. Returns `None` if the map has no valid pixel.
pub fn nearest_fill(map: &SparseRangeMap) -> Option<Field> {
    let (w, h) = (map.width(), map.height());
    if map.valid_count() == 0 {
        return None;
    }
    let mut out = Field::zeros(w, h, 1);
    for v in 0..h {
        for u in 0..w {
            if map.is_valid(u, v) {
                out.set(u, v, 0, map.depth().get(u, v, 0));
                continue;
            }
            // Expand square rings until no closer pixel can exist.
            let mut best: Option<(usize, usize)> = None; // (dist2, index)
            let mut r = 1usize;
            loop {
                let (u0, u1) = (u.saturating_sub(r), (u + r).min(w - 1));
                let (v0, v1) = (v.saturating_sub(r), (v + r).min(h - 1));
                for y in v0..=v1 {
                    for x in u0..=u1 {
                        let ring = x.abs_diff(u).max(y.abs_diff(v));
                        if ring != r || !map.is_valid(x, y) {
                            continue;
                        }
                        let d2 = x.abs_diff(u).pow(2) + y.abs_diff(v).pow(2);
                        let idx = y * w + x;
                        if best.map_or(true, |(bd, bi)| (d2, idx) < (bd, bi)) {
                            best = Some((d2, idx));
                        }
                    }
                }
                let covered = u0 == 0 && v0 == 0 && u1 == w - 1 && v1 == h - 1;
                if let Some((d2, _)) = best {
                    if r * r >= d2 || covered {
                        break;
                    }
                } else if covered {
                    break;
                }
                r += 1;
            }
            let (_, idx) = best.expect("map has a valid pixel");
            out.set(u, v, 0, map.depth().data()[idx]);
        }
    }
    Some(out)
}

/// Dense, strictly positive starting depth from a sparse range map: nearest
/// valid fill followed by one box-down/bilinear-up pyramid blur. An empty map
/// gives a flat `fallback` depth.
pub fn init_depth(map: &SparseRangeMap, fallback: f64) -> Field {
    let (w, h) = (map.width(), map.height());
    let Some(filled) = nearest_fill(map) else {
        return Field::filled(w, h, 1, fallback.max(MIN_DEPTH));
    };
    let blurred = if w % 2 == 0 && h % 2 == 0 && w >= 2 && h >= 2 {
        upsample_bilinear(&downsample_box(&filled).expect("even dims"), 1.0)
    } else {
        filled
    };
    blurred.map(|d| d.max(MIN_DEPTH))
}

/// Depth used when a sweep has no return inside the image, meters.
pub const FALLBACK_DEPTH: f64 = 20.0;

/// Estimates bidirectional flow and both depths for one frame pair.
///
/// Only an `eta` fraction of each LiDAR sweep is read; the remaining points
/// are left for evaluation.
pub fn estimate_pair(
    image_t: &Field,
    image_t1: &Field,
    cloud_t: &PointCloud,
    cloud_t1: &PointCloud,
    rig: &CalibratedRig,
    cfg: &SolverConfig,
) -> Result<PairEstimate> {
    cfg.validate()?;
    image_t.check_same_dims(image_t1, "estimate_pair images")?;
    if rig.width() != image_t.width() || rig.height() != image_t.height() {
        return Err(Error::Shape(format!(
            "calibration is {}x{}, images are {}x{}",
            rig.width(),
            rig.height(),
            image_t.width(),
            image_t.height()
        )));
    }
    let down_t = downsample_cloud(cloud_t, cfg.eta, cfg.cloud_seed(cloud_t.epoch))?;
    let down_t1 = downsample_cloud(cloud_t1, cfg.eta, cfg.cloud_seed(cloud_t1.epoch))?;
    let map_t = rasterize_range_map(&down_t, rig);
    let map_t1 = rasterize_range_map(&down_t1, rig);
    solve_maps(image_t, image_t1, &map_t, &map_t1, cfg)
}

/// Solver core on already rasterized (optimizer-visible) range maps.
pub fn solve_maps(
    image_t: &Field,
    image_t1: &Field,
    map_t: &SparseRangeMap,
    map_t1: &SparseRangeMap,
    cfg: &SolverConfig,
) -> Result<PairEstimate> {
    cfg.validate()?;
    image_t.check_same_dims(image_t1, "solver images")?;
    let levels = cfg.levels;
    let gray_t = build_pyramid(&image_t.to_gray(), levels)?;
    let gray_t1 = build_pyramid(&image_t1.to_gray(), levels)?;
    let mut maps_t = vec![map_t.clone()];
    let mut maps_t1 = vec![map_t1.clone()];
    for _ in 1..levels {
        maps_t.push(maps_t.last().unwrap().downsample()?);
        maps_t1.push(maps_t1.last().unwrap().downsample()?);
    }

    let fallback = mean_depth(map_t, map_t1).unwrap_or(FALLBACK_DEPTH);
    let coarse = levels - 1;
    let depth_t = build_pyramid(&init_depth(map_t, fallback), levels)?.levels.pop().unwrap();
    let depth_t1 = build_pyramid(&init_depth(map_t1, fallback), levels)?.levels.pop().unwrap();
    let (cw, ch) = (depth_t.width(), depth_t.height());
    let mut state = PairState {
        flow_fwd: Field::zeros(cw, ch, 2),
        flow_bwd: Field::zeros(cw, ch, 2),
        depth_t,
        depth_t1,
    };

    let mut trace = Vec::new();
    let mut segment = 0usize;
    let mut accepted_any = false;
    let mut moving_start = false;

    for level in (0..levels).rev() {
        if level != coarse {
            state = PairState {
                flow_fwd: upsample_flow(&state.flow_fwd),
                flow_bwd: upsample_flow(&state.flow_bwd),
                depth_t: upsample_bilinear(&state.depth_t, 1.0).map(|d| d.max(MIN_DEPTH)),
                depth_t1: upsample_bilinear(&state.depth_t1, 1.0).map(|d| d.max(MIN_DEPTH)),
            };
        }
        let inputs = EnergyInputs {
            image_t: gray_t.level(level).clone(),
            image_t1: gray_t1.level(level).clone(),
            supervision_t: maps_t[level].clone(),
            supervision_t1: maps_t1[level].clone(),
        };
        let mut model = EnergyModel::new(&inputs, &cfg.weights)?;
        model.set_l1_smoothing(cfg.huber_flow, cfg.huber_depth * (1u64 << level) as f64);
        let eps = cfg.eps_static / (1u64 << level) as f64;
        let warmup = if level == coarse {
            (cfg.warmup_fraction * cfg.iters_per_level as f64).round() as usize
        } else {
            0
        };
        let mut flow_blocks = [Block::new(cfg.init_step_flow), Block::new(cfg.init_step_flow)];
        let mut depth_blocks = [Block::new(cfg.init_step_depth), Block::new(cfg.init_step_depth)];
        let mut mask = joint_mask(&state.flow_fwd, &state.flow_bwd, eps);
        let mut in_warmup = warmup > 0;
        model.set_toggles(
            cfg.weights.enable_static && !in_warmup,
            cfg.weights.enable_cycle && !in_warmup,
        );
        segment += 1;

        for iter in 0..cfg.iters_per_level {
            let mut changed = false;
            if in_warmup && iter >= warmup {
                in_warmup = false;
                model.set_toggles(cfg.weights.enable_static, cfg.weights.enable_cycle);
                changed = true;
            }
            if iter > 0 && iter % cfg.mask_interval == 0 {
                let next = joint_mask(&state.flow_fwd, &state.flow_bwd, eps);
                if next != mask {
                    mask = next;
                    changed = true;
                }
            }
            if changed {
                segment += 1;
                flow_blocks.iter_mut().chain(depth_blocks.iter_mut()).for_each(Block::reset);
            }
            let all_stalled = flow_blocks.iter().chain(&depth_blocks).all(|b| b.stalled);
            if all_stalled {
                if iter % cfg.mask_interval == 0 || in_warmup {
                    break;
                }
                continue;
            }

            let mut flow_terms = model.evaluate_flow(&state.flow_fwd, &state.flow_bwd, true)?;
            let mut depth_terms =
                model.evaluate_depth(&state.depth_t, &state.depth_t1, &mask, true)?;
            if !accepted_any && trace.is_empty() {
                let (gf, gb) = flow_terms.grads.as_ref().unwrap();
                let (gdt, gdt1) = depth_terms.grads.as_ref().unwrap();
                moving_start = [gf, gb, gdt, gdt1]
                    .iter()
                    .any(|g| g.data().iter().any(|&x| x.abs() > STATIONARY_GRAD));
            }

            for (block, mode) in flow_blocks.iter_mut().zip(MODES) {
                if block.stalled {
                    continue;
                }
                if flow_terms.grads.is_none() {
                    flow_terms = model.evaluate_flow(&state.flow_fwd, &state.flow_bwd, true)?;
                }
                let (gf, gb) = flow_terms.grads.as_ref().unwrap();
                let step = block.step(
                    cfg,
                    mode,
                    [&state.flow_fwd, &state.flow_bwd],
                    [gf, gb],
                    flow_terms.energy,
                    false,
                    |cand| {
                        let t = model.evaluate_flow(&cand[0], &cand[1], false)?;
                        Ok((t.energy, t))
                    },
                )?;
                if let Some(([f, b], terms)) = step {
                    state.flow_fwd = f;
                    state.flow_bwd = b;
                    flow_terms = terms;
                    accepted_any = true;
                }
            }
            for (block, mode) in depth_blocks.iter_mut().zip(MODES) {
                if block.stalled {
                    continue;
                }
                if depth_terms.grads.is_none() {
                    depth_terms =
                        model.evaluate_depth(&state.depth_t, &state.depth_t1, &mask, true)?;
                }
                let (ga, gb) = depth_terms.grads.as_ref().unwrap();
                let step = block.step(
                    cfg,
                    mode,
                    [&state.depth_t, &state.depth_t1],
                    [ga, gb],
                    depth_terms.energy,
                    true,
                    |cand| {
                        let t = model.evaluate_depth(&cand[0], &cand[1], &mask, false)?;
                        Ok((t.energy, t))
                    },
                )?;
                if let Some(([a, b], terms)) = step {
                    state.depth_t = a;
                    state.depth_t1 = b;
                    depth_terms = terms;
                    accepted_any = true;
                }
            }
            trace.push(TracePoint {
                level,
                segment,
                total: model.report(&flow_terms, &depth_terms).total,
            });
        }
    }

    if !accepted_any && moving_start {
        return Err(Error::Convergence {
            reason: "no step decreased the energy".into(),
            trace: trace.iter().map(|p| p.total).collect(),
        });
    }

    let eps = cfg.eps_static;
    let mask = joint_mask(&state.flow_fwd, &state.flow_bwd, eps);
    let inputs = EnergyInputs {
        image_t: gray_t.level(0).clone(),
        image_t1: gray_t1.level(0).clone(),
        supervision_t: map_t.clone(),
        supervision_t1: map_t1.clone(),
    };
    let model = EnergyModel::new(&inputs, &cfg.weights)?;
    let (report, _) = model.evaluate(&state, &mask, false)?;
    Ok(PairEstimate {
        flow_fwd: state.flow_fwd,
        flow_bwd: state.flow_bwd,
        depth_t: state.depth_t,
        depth_t1: state.depth_t1,
        mask,
        report,
        energy_trace: trace,
    })
}

fn mean_depth(a: &SparseRangeMap, b: &SparseRangeMap) -> Option<f64> {
    let (s, n) = a
        .samples()
        .chain(b.samples())
        .fold((0.0, 0usize), |(s, n), (_, _, d)| (s + d, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// How a search direction acts on the two fields of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// The same update for both fields, along their mean gradient.
    Same,
    /// Opposite updates, along half the gradient difference.
    Opposite,
}

const MODES: [Mode; 2] = [Mode::Same, Mode::Opposite];

/// Line-search state for one direction family of a variable block.
struct Block {
    max_step: f64,
    scale: f64,
    stalled: bool,
    /// Previous gradient, its smoothed version and the previous direction,
    /// for conjugate-gradient updates.
    history: Option<(Field, Field, Field)>,
}

fn dot(a: &Field, b: &Field) -> f64 {
    let row = a.width() * a.channels();
    let rows: Vec<f64> = a
        .data()
        .par_chunks(row)
        .zip(b.data().par_chunks(row))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    rows.iter().sum()
}

impl Block {
    fn new(max_step: f64) -> Self {
        Self {
            max_step,
            scale: 1.0,
            stalled: false,
            history: None,
        }
    }

    /// Forgets the search history after the objective changed.
    fn reset(&mut self) {
        self.stalled = false;
        self.history = None;
    }

    /// One nonlinear conjugate-gradient step (Polak-Ribiere+, in the metric of
    /// the gradient smoother) with step halving. Returns the accepted fields
    /// and the evaluation payload, or `None` if no trial decreased the energy
    /// (the block is then marked stalled).
    #[allow(clippy::too_many_arguments)]
    fn step<T>(
        &mut self,
        cfg: &SolverConfig,
        mode: Mode,
        vars: [&Field; 2],
        grads: [&Field; 2],
        energy: f64,
        positive: bool,
        mut eval: impl FnMut(&[Field; 2]) -> Result<(f64, T)>,
    ) -> Result<Option<([Field; 2], T)>> {
        let sign = match mode {
            Mode::Same => 1.0,
            Mode::Opposite => -1.0,
        };
        let g = grads[0].axpy(sign, grads[1])?.map(|x| 0.5 * x);
        let sg = smooth_direction(&g, cfg.direction_smoothing);
        let gsg = dot(&g, &sg);
        if !(gsg > 0.0) {
            self.stalled = true;
            return Ok(None);
        }
        let mut dir = sg.map(|x| -x);
        if let Some((g0, sg0, d0)) = &self.history {
            let beta = ((gsg - dot(&g, sg0)) / dot(g0, sg0)).max(0.0);
            if beta.is_finite() && beta > 0.0 {
                let cand = dir.axpy(beta, d0)?;
                if dot(&g, &cand) < 0.0 {
                    dir = cand;
                }
            }
        }
        let peak = dir.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(peak > 0.0) {
            self.stalled = true;
            return Ok(None);
        }
        for _ in 0..=cfg.step_halvings_max {
            let s = self.scale * self.max_step / peak;
            let update = |var: &Field, s: f64| {
                let mut f = var.clone();
                for (x, d) in f.data_mut().iter_mut().zip(dir.data()) {
                    *x += s * d;
                    if positive {
                        *x = x.max(MIN_DEPTH);
                    }
                }
                f
            };
            let cand = [update(vars[0], s), update(vars[1], sign * s)];
            let (e, payload) = eval(&cand)?;
            if e < energy {
                self.scale = (self.scale * 2.0).min(1.0);
                self.history = Some((g, sg, dir));
                return Ok(Some((cand, payload)));
            }
            self.scale *= 0.5;
        }
        self.stalled = true;
        self.scale = 1.0;
        self.history = None;
        Ok(None)
    }
}

/// `passes` rounds of the separable `[1, 2, 1] / 4` filter with replicated
/// edges. Symmetric positive semidefinite; constant fields are fixed points.
pub fn smooth_direction(grad: &Field, passes: usize) -> Field {
    let (w, h, c) = (grad.width(), grad.height(), grad.channels());
    let mut cur = grad.clone();
    for _ in 0..passes {
        let src = cur.data();
        let mut tmp = vec![0.0; src.len()];
        tmp.par_chunks_mut(w * c).enumerate().for_each(|(v, row)| {
            let s = &src[v * w * c..(v + 1) * w * c];
            for u in 0..w {
                for k in 0..c {
                    let mid = s[u * c + k];
                    let l = if u > 0 { s[(u - 1) * c + k] } else { mid };
                    let r = if u + 1 < w { s[(u + 1) * c + k] } else { mid };
                    row[u * c + k] = 0.25 * l + 0.5 * mid + 0.25 * r;
                }
            }
        });
        let mut out = vec![0.0; src.len()];
        out.par_chunks_mut(w * c).enumerate().for_each(|(v, row)| {
            let mid = &tmp[v * w * c..(v + 1) * w * c];
            for (i, o) in row.iter_mut().enumerate() {
                let up = if v > 0 { tmp[(v - 1) * w * c + i] } else { mid[i] };
                let dn = if v + 1 < h { tmp[(v + 1) * w * c + i] } else { mid[i] };
                *o = 0.25 * up + 0.5 * mid[i] + 0.25 * dn;
            }
        });
        cur = Field::from_vec(w, h, c, out).expect("same size");
    }
    cur
}
