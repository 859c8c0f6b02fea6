//! Implementations of the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use surflow_core::energy::EnergyReport;
use surflow_core::geom::split_cloud;
use surflow_core::io;
use surflow_core::kinematics::{
    channel_cross_section, lift_to_scene_flow, smooth_flow, speed_profile, Region, SceneFlowFrame,
    SpeedProfile,
};
use surflow_core::metrics::{census_loss, depth_eval, endpoint_error, rmsd, DepthEvalReport, EndpointError, DEFAULT_CENSUS_EPS};
use surflow_core::raster::{backward_warp, Field};
use surflow_core::solver::{estimate_pair, PairEstimate, SolverConfig, TracePoint};
use surflow_core::synth::{generate, SceneSpec};

use crate::manifest::DatasetManifest;

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
const RASTERS: [&str; 5] = ["flow_fwd", "flow_bwd", "depth_t", "depth_t1", "mask"];

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub eta: Option<f64>,
    pub lambda_flow: Option<f64>,
    pub lambda_depth: Option<f64>,
    pub no_static: bool,
    pub no_cycle: bool,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut SolverConfig) {
        if let Some(x) = self.eta {
            cfg.eta = x;
        }
        if let Some(x) = self.lambda_flow {
            cfg.weights.lambda_flow = x;
        }
        if let Some(x) = self.lambda_depth {
            cfg.weights.lambda_depth = x;
        }
        if self.no_static {
            cfg.weights.enable_static = false;
        }
        if self.no_cycle {
            cfg.weights.enable_cycle = false;
        }
        if let Some(x) = self.seed {
            cfg.seed = x;
        }
    }
}

/// TOML file with the solver keys at top level and weights under `[weights]`.
pub fn load_config(path: Option<&Path>) -> Result<SolverConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => SolverConfig::default(),
    };
    Ok(cfg)
}

pub fn pair_dir(out: &Path, epoch: u64) -> PathBuf {
    out.join(format!("pair_{epoch:06}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub epoch: u64,
    pub energy: EnergyReport,
    pub trace: Vec<TracePoint>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Rasters first, report last through a rename, so a present report marks a
/// complete directory.
pub fn write_pair(dir: &Path, epoch: u64, est: &PairEstimate) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fields = [&est.flow_fwd, &est.flow_bwd, &est.depth_t, &est.depth_t1, &est.mask];
    for (name, f) in RASTERS.iter().zip(fields) {
        io::write_dflo(&dir.join(format!("{name}.dflo")), f)?;
    }
    let report = PairReport { epoch, energy: est.report.clone(), trace: est.energy_trace.clone() };
    let tmp = dir.join(format!("{REPORT_FILE}.tmp"));
    write_json(&tmp, &report)?;
    fs::rename(&tmp, dir.join(REPORT_FILE))?;
    Ok(())
}

/// A pair estimate read back from disk.
#[derive(Debug, Clone)]
pub struct StoredPair {
    pub epoch: u64,
    pub flow_fwd: Field,
    pub flow_bwd: Field,
    pub depth_t: Field,
    pub depth_t1: Field,
    pub mask: Field,
    pub report: PairReport,
}

pub fn read_pair(dir: &Path) -> Result<StoredPair> {
    let report: PairReport = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)
        .with_context(|| format!("parsing {}", dir.join(REPORT_FILE).display()))?;
    let mut f = Vec::with_capacity(RASTERS.len());
    for name in RASTERS {
        let p = dir.join(format!("{name}.dflo"));
        f.push(io::read_dflo(&p).with_context(|| format!("epoch {}: reading {}", report.epoch, p.display()))?);
    }
    let mut f = f.into_iter();
    let mut next = || f.next().expect("five rasters");
    Ok(StoredPair {
        epoch: report.epoch,
        flow_fwd: next(),
        flow_bwd: next(),
        depth_t: next(),
        depth_t1: next(),
        mask: next(),
        report,
    })
}

/// Completed pairs in an estimate directory, ordered by epoch.
pub fn read_estimates(dir: &Path) -> Result<Vec<StoredPair>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(e) = name.strip_prefix("pair_").and_then(|s| s.parse::<u64>().ok()) {
            if path.join(REPORT_FILE).is_file() {
                found.insert(e, path);
            }
        }
    }
    found.values().map(|p| read_pair(p)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EstimateSummary {
    pub computed: Vec<u64>,
    pub skipped: Vec<u64>,
    pub failed: Vec<(u64, String)>,
}

/// Solves every consecutive pair of the manifest into `out/pair_NNNNNN`.
/// Pairs with a report are skipped. Failed pairs do not stop the others.
pub fn estimate(manifest: &DatasetManifest, cfg: &SolverConfig, out: &Path, jobs: usize) -> Result<EstimateSummary> {
    cfg.validate()?;
    if manifest.last_frame == manifest.first_frame {
        bail!("manifest holds a single frame; estimation needs pairs");
    }
    let rig = manifest.rig()?;
    manifest.check_divisible(rig.width(), rig.height(), cfg.levels)?;
    fs::create_dir_all(out)?;
    let cfg_path = out.join(CONFIG_FILE);
    let cfg_json = serde_json::to_string_pretty(cfg)? + "\n";
    match fs::read_to_string(&cfg_path) {
        Ok(old) if old != cfg_json => bail!(
            "{} holds estimates from a different configuration",
            out.display()
        ),
        Ok(_) => {}
        Err(_) => fs::write(&cfg_path, &cfg_json)?,
    }

    let epochs: Vec<u64> = (manifest.first_frame..manifest.last_frame).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<(u64, Result<bool>)> = pool.install(|| {
        epochs
            .par_iter()
            .map(|&e| (e, estimate_one(manifest, &rig, cfg, out, e)))
            .collect()
    });

    let mut summary = EstimateSummary::default();
    for (e, r) in results {
        match r {
            Ok(true) => summary.computed.push(e),
            Ok(false) => summary.skipped.push(e),
            Err(err) => {
                warn!("pair {e}: {err:#}");
                summary.failed.push((e, format!("{err:#}")));
            }
        }
    }
    Ok(summary)
}

fn estimate_one(
    manifest: &DatasetManifest,
    rig: &surflow_core::geom::CalibratedRig,
    cfg: &SolverConfig,
    out: &Path,
    epoch: u64,
) -> Result<bool> {
    let dir = pair_dir(out, epoch);
    if dir.join(REPORT_FILE).is_file() {
        info!("pair {epoch}: complete, skipping");
        return Ok(false);
    }
    let next = epoch + 1;
    let (img_t, img_t1) = (manifest.image(epoch)?, manifest.image(next)?);
    let (cloud_t, cloud_t1) = (manifest.cloud(epoch)?, manifest.cloud(next)?);
    let est = estimate_pair(&img_t, &img_t1, &cloud_t, &cloud_t1, rig, cfg)
        .with_context(|| format!("epoch {epoch}: solving pair {epoch}-{next}"))?;
    write_pair(&dir, epoch, &est).with_context(|| format!("epoch {epoch}: writing {}", dir.display()))?;
    info!(
        "pair {epoch}: energy {:.6} (photo {:.6}, depth {:.6}), {} iterations",
        est.report.total,
        est.report.photo,
        est.report.depth_l1,
        est.energy_trace.len()
    );
    Ok(true)
}

/// Temporally smoothed forward flow for each stored pair; the first and last
/// pair and pairs without both neighbours keep their own flow.
pub fn smoothed_flows(pairs: &[StoredPair], lambda: [f64; 3]) -> Result<Vec<Field>> {
    (0..pairs.len())
        .map(|i| {
            let p = &pairs[i];
            let prev = i.checked_sub(1).map(|j| &pairs[j]).filter(|q| q.epoch + 1 == p.epoch);
            let next = pairs.get(i + 1).filter(|q| q.epoch == p.epoch + 1);
            match (prev, next) {
                (Some(a), Some(c)) => smooth_flow(&a.flow_fwd, &a.flow_bwd, &p.flow_fwd, &c.flow_fwd, lambda)
                    .with_context(|| format!("epoch {}: temporal smoothing", p.epoch)),
                _ => Ok(p.flow_fwd.clone()),
            }
        })
        .collect()
}

/// Lifted frames, optionally restricted to pixels outside the static mask.
pub fn lift_all(
    pairs: &[StoredPair],
    flows: &[Field],
    manifest: &DatasetManifest,
    moving_only: bool,
) -> Result<Vec<(u64, SceneFlowFrame)>> {
    let rig = manifest.rig()?;
    pairs
        .par_iter()
        .zip(flows)
        .map(|(p, f)| {
            let mut frame = lift_to_scene_flow(f, &p.depth_t, &p.depth_t1, &rig)
                .with_context(|| format!("epoch {}: lifting", p.epoch))?;
            if moving_only {
                frame.restrict(&p.mask.map(|m| 1.0 - m))?;
            }
            Ok((p.epoch, frame))
        })
        .collect()
}

pub struct ProfileOutput {
    pub profile: SpeedProfile,
    /// Cross-section of the per-pixel mean speed over all epochs.
    pub cross_section: Option<Vec<(f64, f64)>>,
}

pub fn profile(
    estimates: &Path,
    manifest: &DatasetManifest,
    region: Region,
    lambda: [f64; 3],
    moving_only: bool,
    band: Option<(usize, usize)>,
) -> Result<ProfileOutput> {
    let pairs = read_estimates(estimates)?;
    if pairs.len() < 2 {
        bail!("profile needs at least 2 estimates, found {}", pairs.len());
    }
    let flows = smoothed_flows(&pairs, lambda)?;
    let frames = lift_all(&pairs, &flows, manifest, moving_only)?;
    let profile = speed_profile(&frames, region, manifest.frame_interval)?;
    let cross_section = band
        .map(|b| {
            let first = &frames[0].1;
            let n = first.width * first.height;
            let mut sum = vec![0.0; n];
            let mut valid = vec![true; n];
            for (_, f) in &frames {
                let s = f.speeds(manifest.frame_interval);
                for i in 0..n {
                    sum[i] += s.data()[i];
                    valid[i] &= f.valid[i];
                }
            }
            let k = frames.len() as f64;
            let mean = Field::from_vec(first.width, first.height, 1, sum.iter().map(|s| s / k).collect())?;
            let mut geom = first.clone();
            geom.valid = valid;
            Ok::<_, anyhow::Error>(channel_cross_section(&geom, &mean, b, 0.5)?)
        })
        .transpose()?;
    Ok(ProfileOutput { profile, cross_section })
}

/// Per-pixel scene flow of one pair as CSV rows of valid pixels.
pub fn lift_csv(estimates: &Path, manifest: &DatasetManifest, epoch: u64) -> Result<String> {
    let pair = read_pair(&pair_dir(estimates, epoch)).with_context(|| format!("epoch {epoch}: no estimate"))?;
    let frame = lift_to_scene_flow(&pair.flow_fwd, &pair.depth_t, &pair.depth_t1, &manifest.rig()?)?;
    let speeds = frame.speeds(manifest.frame_interval);
    let mut s = String::from("u,v,x,y,z,vx,vy,vz,speed_mps\n");
    for i in (0..frame.points.len()).filter(|&i| frame.valid[i]) {
        let (p, v) = (frame.points[i], frame.velocity[i]);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i % frame.width,
            i / frame.width,
            p[0],
            p[1],
            p[2],
            v[0],
            v[1],
            v[2],
            speeds.data()[i]
        ));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub epoch: u64,
    /// Frame t against frame t+1 warped back by the forward flow.
    pub rmsd: f64,
    pub census: f64,
    /// Against the full cloud of epoch t.
    pub depth: DepthEvalReport,
    /// Against the points of epoch t hidden from the optimizer.
    pub depth_heldout: Option<DepthEvalReport>,
    pub epe: Option<EndpointError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_rmsd: f64,
    pub mean_census: f64,
    pub mean_epe: Option<f64>,
    pub mae10: Option<f64>,
    pub mae30: Option<f64>,
    pub mae50: Option<f64>,
    pub abs_rel: Option<f64>,
    /// Metrics that could not be computed for some pair.
    pub unavailable: Vec<String>,
}

pub const EPE_THRESHOLD: f64 = 1.0;

pub fn eval(estimates: &Path, manifest: &DatasetManifest, frames: Option<(u64, u64)>) -> Result<EvalReport> {
    let cfg: Option<SolverConfig> = fs::read_to_string(estimates.join(CONFIG_FILE))
        .ok()
        .map(|s| serde_json::from_str(&s))
        .transpose()
        .context("parsing stored solver config")?;
    let rig = manifest.rig()?;
    let pairs: Vec<StoredPair> = read_estimates(estimates)?
        .into_iter()
        .filter(|p| frames.map_or(true, |(a, b)| p.epoch >= a && p.epoch + 1 <= b))
        .collect();
    if pairs.is_empty() {
        bail!("no estimates to evaluate in {}", estimates.display());
    }
    let metrics: Vec<PairMetrics> = pairs
        .par_iter()
        .map(|p| {
            let e = p.epoch;
            let (img_t, img_t1) = (manifest.image(e)?, manifest.image(e + 1)?);
            let recon = backward_warp(&img_t1, &p.flow_fwd)?;
            let cloud = manifest.cloud(e)?;
            let depth = depth_eval(&p.depth_t, &cloud, &rig)?;
            let depth_heldout = match &cfg {
                Some(c) if c.eta < 1.0 => {
                    let (_, held) = split_cloud(&cloud, c.eta, c.cloud_seed(e))?;
                    Some(depth_eval(&p.depth_t, &held, &rig)?)
                }
                _ => None,
            };
            let epe = manifest
                .gt("flow_fwd", e)?
                .map(|gt| endpoint_error(&p.flow_fwd, &gt, EPE_THRESHOLD))
                .transpose()?;
            Ok(PairMetrics {
                epoch: e,
                rmsd: rmsd(&img_t, &recon)?,
                census: census_loss(&img_t, &recon, DEFAULT_CENSUS_EPS)?,
                depth,
                depth_heldout,
                epe,
            })
        })
        .collect::<Result<_>>()?;

    let n = metrics.len() as f64;
    let mean_opt = |xs: Vec<Option<f64>>| -> Option<f64> {
        let v: Vec<f64> = xs.iter().flatten().copied().collect();
        (v.len() == xs.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut unavailable = Vec::new();
    let mean_epe = mean_opt(metrics.iter().map(|m| m.epe.as_ref().map(|e| e.mean)).collect());
    if mean_epe.is_none() {
        unavailable.push("epe".to_string());
    }
    let band = |f: fn(&DepthEvalReport) -> Option<f64>, name: &str, un: &mut Vec<String>| {
        let v = mean_opt(metrics.iter().map(|m| f(&m.depth)).collect());
        if v.is_none() {
            un.push(name.to_string());
        }
        v
    };
    let mae10 = band(|d| d.mae10, "mae10", &mut unavailable);
    let mae30 = band(|d| d.mae30, "mae30", &mut unavailable);
    let mae50 = band(|d| d.mae50, "mae50", &mut unavailable);
    let abs_rel = band(|d| d.abs_rel, "abs_rel", &mut unavailable);
    if metrics.iter().any(|m| m.depth_heldout.is_none()) {
        unavailable.push("depth_heldout".to_string());
    }
    Ok(EvalReport {
        mean_rmsd: metrics.iter().map(|m| m.rmsd).sum::<f64>() / n,
        mean_census: metrics.iter().map(|m| m.census).sum::<f64>() / n,
        pairs: metrics,
        mean_epe,
        mae10,
        mae30,
        mae50,
        abs_rel,
        unavailable,
    })
}

/// Scene spec from TOML, or JSON when the extension is `.json`.
pub fn load_scene_spec(path: Option<&Path>) -> Result<SceneSpec> {
    let Some(p) = path else { return Ok(SceneSpec::default()) };
    let text = fs::read_to_string(p).with_context(|| format!("reading scene spec {}", p.display()))?;
    let spec = if p.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(spec)
}

/// Writes a dataset: images, clouds, calibration, ground truth and manifest.
pub fn synth(spec: &SceneSpec, out: &Path) -> Result<DatasetManifest> {
    let scene = generate(spec)?;
    let manifest = DatasetManifest::standard(0, spec.frames as u64 - 1, spec.frame_interval);
    for d in ["images", "clouds", "gt"] {
        fs::create_dir_all(out.join(d))?;
    }
    let m = DatasetManifest { root: out.to_path_buf(), ..manifest.clone() };
    for (t, (img, cloud)) in scene.images.iter().zip(&scene.clouds).enumerate() {
        let e = t as u64;
        io::write_png_gray(&m.image_path(e), img)?;
        io::write_cloud(&m.cloud_path(e), cloud)?;
    }
    for (t, (f, b)) in scene.gt_flow.iter().zip(&scene.gt_flow_bwd).enumerate() {
        let e = t as u64;
        io::write_dflo(&m.gt_path("flow_fwd", e).expect("gt dir"), f)?;
        io::write_dflo(&m.gt_path("flow_bwd", e).expect("gt dir"), b)?;
    }
    io::write_dflo(&out.join("gt").join("depth.dflo"), &scene.gt_depth)?;
    let mut speeds = String::from("epoch,time_s,speed_mps\n");
    for (t, s) in scene.gt_speeds.iter().enumerate() {
        let time = t as f64 * spec.frame_interval;
        match s {
            Some(x) => speeds.push_str(&format!("{t},{time},{x}\n")),
            None => speeds.push_str(&format!("{t},{time},\n")),
        }
    }
    fs::write(out.join("gt").join("speeds.csv"), speeds)?;
    io::write_rig(&out.join("calib.json"), &scene.rig)?;
    write_json(&out.join("scene.json"), spec)?;
    manifest.save(out)?;
    Ok(m)
}

/// Parses `a,b,...` into exactly `N` numbers.
pub fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let v: Vec<T> = s
        .split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("`{x}`: {e}")))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|v: Vec<T>| anyhow!("expected {N} comma-separated values, got {}", v.len()))
}
