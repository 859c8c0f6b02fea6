//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surflow_cli::commands::{self, read_estimates, smoothed_flows};
use surflow_core::corr::correlation_volume;
use surflow_core::energy::{
    cycle_loss, depth_loss, photometric_loss, smoothness_loss, static_loss, EnergyInputs, EnergyModel,
    LossWeights, PairState,
};
use surflow_core::geom::{axis_angle, rasterize_range_map, split_cloud, CalibratedRig, PointCloud};
use surflow_core::kinematics::{smooth_flow, DEFAULT_TEMPORAL_WEIGHTS, Region};
use surflow_core::metrics::{census_loss, depth_eval, endpoint_error, rmsd, ssim_index, DEFAULT_CENSUS_EPS};
use surflow_core::raster::{backward_warp, Field};
use surflow_core::solver::{estimate_pair, PairEstimate, SolverConfig};
use surflow_core::synth::{generate, Profile, SceneSpec, SyntheticScene};

// Gradient suite.
const FD_SIZE: usize = 16;
const FD_INSTANCES: u64 = 10;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);

// Geometry suite.
const ROUND_TRIP_TOL_M: f64 = 1e-9;
const ROUND_TRIPS: usize = 1000;

const ORACLE_TOL: f64 = 1e-12;

// Trivial zero.
const ZERO_ENERGY_TOL: f64 = 1e-12;
const ZERO_FLOW_MAX_MEAN: f64 = 0.05;
const ZERO_RECON_RMSD: f64 = 1e-3;

// Flow recovery.
const TRANSLATION: [f64; 2] = [3.0, -2.0];
const EPE_MAX: f64 = 0.25;
const INTERIOR_MARGIN: usize = 8;
const FLOW_BUDGET: Duration = Duration::from_secs(300);

// Depth completion; Abs.Rel. is reported in percent.
const ABS_REL_MAX_PCT: f64 = 1.0;
const ETAS: [f64; 3] = [0.2, 0.5, 0.8];

const SPEED_REL_TOL: f64 = 0.05;

fn main() {
    let criteria: [(&str, fn() -> Result<String>); 9] = [
        ("gradient suite", gradient_suite),
        ("geometry suite", geometry_suite),
        ("oracle equivalence", oracle_suite),
        ("trivial zero", trivial_zero),
        ("flow recovery", flow_recovery),
        ("depth completion", depth_completion),
        ("temporal smoothing", temporal_smoothing),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {secs:.1} s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({e:#}; {secs:.1} s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn all(f: &Field) -> Vec<usize> {
    (0..f.len()).collect()
}

fn gradient_suite() -> Result<String> {
    use common::{fd_check, random_field, random_image, random_range_map, FdStats};
    let start = Instant::now();
    let n = FD_SIZE;
    let mut report = Vec::new();
    let mut finish = |name: &str, st: FdStats| -> Result<()> {
        ensure!(st.checked >= 64 * FD_INSTANCES as usize, "{name}: only {} coordinates checked", st.checked);
        ensure!(st.max_rel < FD_REL_TOL, "{name}: max relative error {:.2e}", st.max_rel);
        report.push(format!("{name} {:.1e}", st.max_rel));
        Ok(())
    };

    let mut st = FdStats::default();
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_image(&mut rng, n, n), random_image(&mut rng, n, n));
        let flow = random_field(&mut rng, n, n, 2, -2.0, 2.0);
        let g = photometric_loss(&a, &b, &flow)?.grad;
        st.merge(fd_check(|f| photometric_loss(&a, &b, f).unwrap().value, &flow, &g, &all(&flow), FD_STEP));
    }
    finish("photo", st)?;

    for (name, channels) in [("smooth_flow", 2), ("smooth_depth", 1)] {
        let mut st = FdStats::default();
        for seed in 0..FD_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let img = random_image(&mut rng, n, n);
            let x = random_field(&mut rng, n, n, channels, -3.0, 3.0);
            let g = smoothness_loss(&x, &img, 10.0)?.grad;
            st.merge(fd_check(|f| smoothness_loss(f, &img, 10.0).unwrap().value, &x, &g, &all(&x), FD_STEP));
        }
        finish(name, st)?;
    }

    let mut st = FdStats::default();
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let map = random_range_map(&mut rng, n, n, 0.4);
        let d = random_field(&mut rng, n, n, 1, 5.0, 50.0);
        let g = depth_loss(&d, &map)?.grad;
        st.merge(fd_check(|f| depth_loss(f, &map).unwrap().value, &d, &g, &all(&d), FD_STEP));
    }
    finish("depth_l1", st)?;

    let mut st = FdStats::default();
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = random_field(&mut rng, n, n, 1, 5.0, 50.0);
        let b = random_field(&mut rng, n, n, 1, 5.0, 50.0);
        let mask = Field::from_fn(n, n, 1, |_, _, _| if rng.gen_bool(0.6) { 1.0 } else { 0.0 });
        let g = static_loss(&a, &b, &mask)?;
        st.merge(fd_check(|f| static_loss(f, &b, &mask).unwrap().value, &a, &g.first, &all(&a), FD_STEP));
        st.merge(fd_check(|f| static_loss(&a, f, &mask).unwrap().value, &b, &g.second, &all(&b), FD_STEP));
    }
    finish("static", st)?;

    let mut st = FdStats::default();
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let f = random_field(&mut rng, n, n, 2, -2.0, 2.0);
        let b = random_field(&mut rng, n, n, 2, -2.0, 2.0);
        let g = cycle_loss(&f, &b)?;
        st.merge(fd_check(|x| cycle_loss(x, &b).unwrap().value, &f, &g.first, &all(&f), FD_STEP));
        st.merge(fd_check(|x| cycle_loss(&f, x).unwrap().value, &b, &g.second, &all(&b), FD_STEP));
    }
    finish("cycle", st)?;

    let mut st = FdStats::default();
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let inputs = EnergyInputs {
            image_t: random_image(&mut rng, n, n),
            image_t1: random_image(&mut rng, n, n),
            supervision_t: random_range_map(&mut rng, n, n, 0.3),
            supervision_t1: random_range_map(&mut rng, n, n, 0.3),
        };
        let model = EnergyModel::new(&inputs, &LossWeights::default())?;
        let state = PairState {
            flow_fwd: random_field(&mut rng, n, n, 2, -2.0, 2.0),
            flow_bwd: random_field(&mut rng, n, n, 2, -2.0, 2.0),
            depth_t: random_field(&mut rng, n, n, 1, 5.0, 50.0),
            depth_t1: random_field(&mut rng, n, n, 1, 5.0, 50.0),
        };
        let mask = Field::from_fn(n, n, 1, |_, _, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let g = model.evaluate(&state, &mask, true)?.1.expect("gradient");
        for k in 0..4 {
            let x = state.fields()[k].clone();
            let energy = |f: &Field| {
                let mut s = state.clone();
                *s.fields_mut()[k] = f.clone();
                model.evaluate(&s, &mask, false).unwrap().0.total
            };
            st.merge(fd_check(energy, &x, g.fields()[k], &all(&x), FD_STEP));
        }
    }
    finish("total", st)?;

    let elapsed = start.elapsed();
    ensure!(elapsed < GRADIENT_BUDGET, "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!("max rel err: {}", report.join(", ")))
}

fn geometry_suite() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..ROUND_TRIPS {
        let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let f = rng.gen_range(100.0..1500.0);
        let rig = CalibratedRig::new(
            f,
            f * rng.gen_range(0.9..1.1),
            rng.gen_range(200.0..440.0),
            rng.gen_range(150.0..330.0),
            axis_angle(axis, rng.gen_range(-3.1..3.1)),
            [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            640,
            480,
        )?;
        let (u, v, z) = (rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0), rng.gen_range(0.5..100.0));
        let p = rig.back_project(u, v, z)?;
        let ((u2, v2), z2) = rig.project(&p)?;
        let q = rig.back_project(u2, v2, z2)?;
        let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
        worst = worst.max(d).max((z2 - z).abs());
    }
    ensure!(worst < ROUND_TRIP_TOL_M, "round trip error {worst:.2e} m");

    let mut pixels = 0;
    for case in 0..20 {
        let (w, h) = (rng.gen_range(8..24), rng.gen_range(8..24));
        let rig = CalibratedRig::new(
            rng.gen_range(10.0..40.0),
            rng.gen_range(10.0..40.0),
            w as f64 / 2.0,
            h as f64 / 2.0,
            axis_angle([0.0, 0.0, 1.0], rng.gen_range(-0.3..0.3)),
            [0.0, 0.0, rng.gen_range(-1.0..1.0)],
            w,
            h,
        )?;
        let points: Vec<[f64; 3]> = (0..400)
            .map(|_| [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-2.0..15.0)])
            .collect();
        let map = rasterize_range_map(&PointCloud::new(points.clone(), 0)?, &rig);
        let want = common::rasterize_reference(&points, &rig);
        let got: Vec<Option<f64>> =
            (0..w * h).map(|i| map.valid_mask()[i].then(|| map.depth().data()[i])).collect();
        ensure!(got == want, "rasterization differs from the reference in case {case}");
        pixels += want.iter().flatten().count();
    }
    Ok(format!("round trip {worst:.1e} m over {ROUND_TRIPS}, {pixels} rasterized pixels exact"))
}

fn max_diff(a: &Field, b: &Field) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Single-window SSIM from plain sums.
fn ssim_reference(x: &Field, y: &Field) -> f64 {
    let n = x.len() as f64;
    let (a, b) = (x.data(), y.data());
    let mx = a.iter().sum::<f64>() / n;
    let my = b.iter().sum::<f64>() / n;
    let vx = a.iter().map(|p| (p - mx).powi(2)).sum::<f64>() / n;
    let vy = b.iter().map(|p| (p - my).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
    (2.0 * mx * my + common::C1) * (2.0 * cov + common::C2) / ((mx * mx + my * my + common::C1) * (vx + vy + common::C2))
}

fn oracle_suite() -> Result<String> {
    use common::{random_field, random_image};
    let mut worst = BTreeMap::new();
    let mut track = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0f64);
        *e = e.max(err);
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (w, h) = (rng.gen_range(5..=16), rng.gen_range(5..=16));
        let c = rng.gen_range(1..4);
        let (f1, f2) = (random_field(&mut rng, w, h, c, -1.0, 1.0), random_field(&mut rng, w, h, c, -1.0, 1.0));
        for window in [1, 3, 9] {
            let vol = correlation_volume(&f1, &f2, window)?;
            track("correlation", max_diff(vol.as_field(), &common::correlation(&f1, &f2, window)));
        }

        let a = random_field(&mut rng, w, h, 3, 0.0, 1.0);
        let b = random_field(&mut rng, w, h, 3, 0.0, 1.0);
        track("rmsd", (rmsd(&a, &b)? - common::rmsd(&a, &b)).abs());
        let noise = random_field(&mut rng, w, h, 3, -0.05, 0.05);
        let an = a.axpy(1.0, &noise)?;
        for eps in [0.0, DEFAULT_CENSUS_EPS, 0.2] {
            track("census", (census_loss(&a, &an, eps)? - common::census(&a, &an, eps)).abs());
        }
        track("ssim", (ssim_index(&a, &b)? - ssim_reference(&a, &b)).abs());

        let (ia, ib) = (random_image(&mut rng, w, h), random_image(&mut rng, w, h));
        let flow = random_field(&mut rng, w, h, 2, -3.0, 3.0);
        track("photometric ssim", (photometric_loss(&ia, &ib, &flow)?.value - common::photometric(&ia, &ib, &flow)).abs());

        let bwd = random_field(&mut rng, w, h, 2, -4.0, 4.0);
        track("cycle", (cycle_loss(&flow, &bwd)?.value - common::cycle(&flow, &bwd)).abs());

        let big = random_field(&mut rng, w, h, 2, -20.0, 20.0);
        track("warp", max_diff(&backward_warp(&a, &big)?, &common::warp(&a, &big)));
    }
    for (name, e) in &worst {
        ensure!(*e <= ORACLE_TOL, "{name}: max deviation {e:.2e}");
    }
    let worst_all = worst.values().copied().fold(0.0, f64::max);
    Ok(format!("{} operations, max deviation {worst_all:.1e}", worst.len()))
}

fn mean_norm(flow: &Field) -> f64 {
    let n = flow.num_pixels();
    (0..n).map(|i| flow.data()[2 * i].hypot(flow.data()[2 * i + 1])).sum::<f64>() / n as f64
}

fn trivial_zero() -> Result<String> {
    // A fronto-parallel plane, so the true depth field has no gradient.
    let spec = SceneSpec {
        width: 128,
        height: 96,
        focal: 100.0,
        near: 20.0,
        far: 20.0,
        lidar_points: 2000,
        velocities: vec![[0.0, 0.0]],
        ..SceneSpec::default()
    };
    let scene = generate(&spec)?;
    let (img, cloud) = (&scene.images[0], &scene.clouds[0]);
    ensure!(scene.images[1] == *img, "static frames differ");

    let cfg = SolverConfig::default();
    let (kept, _) = split_cloud(cloud, cfg.eta, cfg.cloud_seed(0))?;
    let map = rasterize_range_map(&kept, &scene.rig);
    let inputs =
        EnergyInputs { image_t: img.clone(), image_t1: img.clone(), supervision_t: map.clone(), supervision_t1: map };
    let model = EnergyModel::new(&inputs, &cfg.weights)?;
    let state = PairState {
        flow_fwd: Field::zeros(128, 96, 2),
        flow_bwd: Field::zeros(128, 96, 2),
        depth_t: scene.gt_depth.clone(),
        depth_t1: scene.gt_depth.clone(),
    };
    let (energy, _) = model.evaluate(&state, &Field::filled(128, 96, 1, 1.0), false)?;
    ensure!(energy.total.abs() < ZERO_ENERGY_TOL, "energy at zero state {:?}", energy);

    let est = estimate_pair(img, img, cloud, cloud, &scene.rig, &cfg)?;
    let (mf, mb) = (mean_norm(&est.flow_fwd), mean_norm(&est.flow_bwd));
    ensure!(mf < ZERO_FLOW_MAX_MEAN && mb < ZERO_FLOW_MAX_MEAN, "mean |O_f| {mf:.3e}, |O_b| {mb:.3e}");
    let r = rmsd(&backward_warp(img, &est.flow_fwd)?, img)?;
    ensure!(r < ZERO_RECON_RMSD, "reconstruction RMSD {r:.3e}");
    Ok(format!("energy {:.1e}, mean |O_f| {mf:.1e}, reconstruction RMSD {r:.1e}", energy.total))
}

fn interior_epe(flow: &Field, truth: [f64; 2]) -> f64 {
    let (w, h, m) = (flow.width(), flow.height(), INTERIOR_MARGIN);
    let mut sum = 0.0;
    for v in m..h - m {
        for u in m..w - m {
            sum += (flow.get(u, v, 0) - truth[0]).hypot(flow.get(u, v, 1) - truth[1]);
        }
    }
    sum / ((w - 2 * m) * (h - 2 * m)) as f64
}

fn flow_recovery() -> Result<String> {
    let spec = SceneSpec { velocities: vec![TRANSLATION], ..SceneSpec::default() };
    let scene = generate(&spec)?;
    let start = Instant::now();
    let est = single_thread(|| {
        let s = &scene;
        estimate_pair(&s.images[0], &s.images[1], &s.clouds[0], &s.clouds[1], &s.rig, &SolverConfig::default())
    })?;
    let elapsed = start.elapsed();
    let epe = interior_epe(&est.flow_fwd, TRANSLATION);
    ensure!(epe < EPE_MAX, "interior EPE {epe:.4} px");
    ensure!(elapsed < FLOW_BUDGET, "solver took {:.1} s", elapsed.as_secs_f64());
    Ok(format!(
        "{}x{} EPE {epe:.4} px, solver {:.1} s on one thread",
        spec.width,
        spec.height,
        elapsed.as_secs_f64()
    ))
}

fn solve(scene: &SyntheticScene, cfg: &SolverConfig) -> Result<PairEstimate> {
    let s = scene;
    Ok(estimate_pair(&s.images[0], &s.images[1], &s.clouds[0], &s.clouds[1], &s.rig, cfg)?)
}

fn depth_completion() -> Result<String> {
    let spec = SceneSpec { far: 50.0, near: 10.0, ..SceneSpec::default() };
    let scene = generate(&spec)?;
    let full = &scene.clouds[0];
    let mut maes = Vec::new();
    let mut held_abs_rel = None;
    for eta in ETAS {
        let cfg = SolverConfig { eta, ..SolverConfig::default() };
        let est = solve(&scene, &cfg)?;
        let all = depth_eval(&est.depth_t, full, &scene.rig)?;
        maes.push(all.mae50.context("no returns within 50 m")?);
        if eta == 0.5 {
            let (_, held) = split_cloud(full, eta, cfg.cloud_seed(0))?;
            held_abs_rel = depth_eval(&est.depth_t, &held, &scene.rig)?.abs_rel;
        }
    }
    let abs_rel = held_abs_rel.context("no held-out returns")?;
    ensure!(abs_rel < ABS_REL_MAX_PCT, "held-out Abs.Rel. {abs_rel:.3}%");
    ensure!(
        maes.windows(2).all(|w| w[1] <= w[0]),
        "MAE over eta {ETAS:?} is {maes:.4?}, not non-increasing"
    );
    Ok(format!("held-out Abs.Rel. {abs_rel:.3}%, MAE over eta {ETAS:?}: {maes:.4?} m"))
}

struct Sequence {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    est: PathBuf,
    gt: Vec<Option<f64>>,
}

fn small_sequence(velocities: Vec<[f64; 2]>, frames: usize) -> Result<Sequence> {
    let spec = SceneSpec {
        width: 128,
        height: 96,
        focal: 100.0,
        frames,
        lidar_points: 2000,
        velocities,
        ..SceneSpec::default()
    };
    let tmp = tempfile::tempdir()?;
    let data = tmp.path().join("data");
    let est = tmp.path().join("est");
    let manifest = commands::synth(&spec, &data)?;
    let cfg = SolverConfig { iters_per_level: 100, ..SolverConfig::default() };
    let summary = commands::estimate(&manifest, &cfg, &est, 1)?;
    ensure!(summary.failed.is_empty(), "estimation failed: {:?}", summary.failed);
    let gt = generate(&spec)?.gt_speeds;
    Ok(Sequence { _tmp: tmp, data, est, gt })
}

fn profile_of(seq: &Sequence, lambda: [f64; 3]) -> Result<Vec<f64>> {
    let m = surflow_cli::manifest::DatasetManifest::load(&seq.data)?;
    let p = commands::profile(&seq.est, &m, Region::default(), lambda, false, None)?.profile;
    p.speeds.iter().map(|s| s.context("empty region")).collect()
}

fn rel_err(x: f64, truth: f64) -> f64 {
    (x - truth).abs() / truth.abs()
}

fn temporal_smoothing() -> Result<String> {
    let constant = small_sequence(vec![[0.0, -2.0]], 7)?;
    let pairs = read_estimates(&constant.est)?;
    let identity = smoothed_flows(&pairs, [0.0, 1.0, 0.0])?;
    for (p, f) in pairs.iter().zip(&identity) {
        ensure!(*f == p.flow_fwd, "identity weights changed the flow of pair {}", p.epoch);
    }
    let (a, b, c, d) = (&pairs[0].flow_fwd, &pairs[0].flow_bwd, &pairs[1].flow_fwd, &pairs[2].flow_fwd);
    ensure!(smooth_flow(a, b, c, d, [0.0, 1.0, 0.0])? == *c, "identity weights are not bitwise exact");

    let speeds = profile_of(&constant, DEFAULT_TEMPORAL_WEIGHTS)?;
    let truth = constant.gt[0].context("ground-truth region empty")?;
    let worst_const = speeds.iter().map(|&s| rel_err(s, truth)).fold(0.0, f64::max);
    ensure!(worst_const < SPEED_REL_TOL, "constant profile {speeds:.4?} vs {truth:.4}");

    // Two segments; epochs whose smoothing window straddles the switch are
    // left out of the per-epoch check.
    let schedule = [[0.0, -1.0], [0.0, -1.0], [0.0, -1.0], [0.0, -1.0], [0.0, -2.5], [0.0, -2.5], [0.0, -2.5], [0.0, -2.5]];
    let switch = 4;
    let piecewise = small_sequence(schedule.to_vec(), schedule.len() + 1)?;
    let speeds = profile_of(&piecewise, DEFAULT_TEMPORAL_WEIGHTS)?;
    let mut worst_seg: f64 = 0.0;
    for segment in [0..switch - 1, switch + 1..schedule.len()] {
        let truth = piecewise.gt[segment.start].context("ground-truth region empty")?;
        let errs: Vec<f64> = segment.clone().map(|e| rel_err(speeds[e], truth)).collect();
        let mean = segment.clone().map(|e| speeds[e]).sum::<f64>() / segment.len() as f64;
        worst_seg = errs.iter().copied().fold(worst_seg, f64::max).max(rel_err(mean, truth));
        ensure!(
            errs.iter().all(|&e| e < SPEED_REL_TOL) && rel_err(mean, truth) < SPEED_REL_TOL,
            "segment {segment:?}: profile {:.4?} vs {truth:.4}",
            &speeds[segment.clone()]
        );
    }
    Ok(format!(
        "identity bitwise, constant worst {:.2}%, piecewise worst {:.2}%",
        100.0 * worst_const,
        100.0 * worst_seg
    ))
}

struct AblationScores {
    epe: f64,
    mae: f64,
}

fn ablation_scores(scene: &SyntheticScene, cfg: &SolverConfig) -> Result<AblationScores> {
    let est = solve(scene, cfg)?;
    let epe = 0.5
        * (endpoint_error(&est.flow_fwd, &scene.gt_flow[0], 1.0)?.mean
            + endpoint_error(&est.flow_bwd, &scene.gt_flow_bwd[0], 1.0)?.mean);
    let mut mae = 0.0;
    for (t, depth) in [&est.depth_t, &est.depth_t1].into_iter().enumerate() {
        let cloud = &scene.clouds[t];
        let (_, held) = split_cloud(cloud, cfg.eta, cfg.cloud_seed(cloud.epoch))?;
        mae += 0.5 * depth_eval(depth, &held, &scene.rig)?.mae50.context("no held-out returns")?;
    }
    Ok(AblationScores { epe, mae })
}

fn ablation_direction() -> Result<String> {
    let spec = SceneSpec {
        bank_width: 64,
        velocities: vec![[0.0, -2.5]],
        profile: Profile::Parabolic,
        image_noise: 0.02,
        depth_noise: 0.04,
        ..SceneSpec::default()
    };
    let scene = generate(&spec)?;
    let on = SolverConfig::default();
    let mut off = on.clone();
    off.weights.enable_static = false;
    off.weights.enable_cycle = false;
    let (a, b) = (ablation_scores(&scene, &on)?, ablation_scores(&scene, &off)?);
    let detail = format!(
        "EPE {:.4} vs {:.4} px, held-out MAE {:.4} vs {:.4} m (with vs without)",
        a.epe, b.epe, a.mae, b.mae
    );
    ensure!(a.epe <= b.epe && a.mae <= b.mae, "{detail}");
    Ok(detail)
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Result<String> {
    let spec = SceneSpec {
        width: 128,
        height: 96,
        focal: 100.0,
        frames: 4,
        lidar_points: 2000,
        velocities: vec![[1.5, -1.0]],
        ..SceneSpec::default()
    };
    let tmp = tempfile::tempdir()?;
    let data = tmp.path().join("data");
    commands::synth(&spec, &data)?;
    let cfg = tmp.path().join("solver.toml");
    fs::write(&cfg, "iters_per_level = 40\nseed = 7\n")?;
    let mut trees = Vec::new();
    for (run, jobs) in [1, 1, 2, 3].into_iter().enumerate() {
        let out = tmp.path().join(format!("est{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_surflow"))
            .args(["estimate", "--jobs", &jobs.to_string(), "--config"])
            .arg(&cfg)
            .arg("--manifest")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .status()?;
        ensure!(status.success(), "estimate --jobs {jobs} failed");
        trees.push((jobs, tree(&out)?));
    }
    let files = trees[0].1.len();
    ensure!(files == 1 + 3 * 6, "unexpected output tree with {files} files");
    for (jobs, t) in &trees[1..] {
        ensure!(*t == trees[0].1, "--jobs {jobs} output differs from --jobs 1");
    }
    Ok(format!("{files} files identical across --jobs 1, 1, 2, 3"))
}
