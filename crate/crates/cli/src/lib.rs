//! Command-line pipeline: dataset ingestion, per-pair estimation, speed
//! profiles, evaluation and synthetic datasets.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use surflow_core::kinematics::{Region, DEFAULT_TEMPORAL_WEIGHTS};

use crate::commands::{parse_list, Overrides};
use crate::manifest::DatasetManifest;

#[derive(Debug, Parser)]
#[command(name = "surflow", version, about = "Surface flow estimation for camera-LiDAR rigs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Solver config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda_flow: Option<f64>,
    #[arg(long)]
    pub lambda_depth: Option<f64>,
    #[arg(long)]
    pub no_static: bool,
    #[arg(long)]
    pub no_cycle: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate flow and depth for every consecutive frame pair.
    Estimate {
        /// Manifest file or dataset directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Flow-speed profile over a region from an estimate directory.
    Profile {
        /// Estimate directory.
        estimates: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// x0,x1,y0,y1 in meters.
        #[arg(long)]
        region: Option<String>,
        /// Image rows v0,v1 for a cross-section, written next to the profile.
        #[arg(long)]
        band: Option<String>,
        /// Temporal weights l0,l1,l2.
        #[arg(long)]
        temporal: Option<String>,
        /// Average only pixels outside the static mask.
        #[arg(long)]
        moving_only: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Metrics report (JSON) for an estimate directory.
    Eval {
        estimates: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frame range first,last.
        #[arg(long)]
        frames: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a synthetic dataset.
    Synth {
        /// Scene spec (TOML, or JSON by extension); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-pixel scene flow of one pair as CSV.
    Lift {
        estimates: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epoch: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate { manifest, out, solver, jobs } => {
            let m = DatasetManifest::load(&manifest)?;
            let mut cfg = commands::load_config(solver.config.as_deref())?;
            Overrides {
                eta: solver.eta,
                lambda_flow: solver.lambda_flow,
                lambda_depth: solver.lambda_depth,
                no_static: solver.no_static,
                no_cycle: solver.no_cycle,
                seed: solver.seed,
            }
            .apply(&mut cfg);
            let summary = commands::estimate(&m, &cfg, &out, jobs)?;
            log::info!(
                "{} pairs computed, {} skipped, {} failed",
                summary.computed.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            if !summary.failed.is_empty() {
                let msgs: Vec<String> = summary.failed.iter().map(|(_, m)| m.clone()).collect();
                bail!("{} pair(s) failed:\n{}", msgs.len(), msgs.join("\n"));
            }
            Ok(())
        }
        Command::Profile { estimates, manifest, out, region, band, temporal, moving_only, jobs } => {
            let m = DatasetManifest::load(&manifest)?;
            let region = match region {
                Some(s) => {
                    let [x0, x1, y0, y1] = parse_list::<4, f64>(&s).context("--region")?;
                    Region { x0, x1, y0, y1 }
                }
                None => Region::default(),
            };
            let band = band.map(|s| parse_list::<2, usize>(&s).context("--band")).transpose()?;
            let lambda = match temporal {
                Some(s) => parse_list::<3, f64>(&s).context("--temporal")?,
                None => DEFAULT_TEMPORAL_WEIGHTS,
            };
            let res = thread_pool(jobs)?.install(|| {
                commands::profile(&estimates, &m, region, lambda, moving_only, band.map(|[a, b]| (a, b)))
            })?;
            std::fs::write(&out, res.profile.to_csv())?;
            if let Some(rows) = res.cross_section {
                let path = out.with_extension("cross_section.csv");
                std::fs::write(&path, surflow_core::kinematics::cross_section_csv(&rows))?;
            }
            Ok(())
        }
        Command::Eval { estimates, manifest, out, frames, jobs } => {
            let m = DatasetManifest::load(&manifest)?;
            let frames = frames.map(|s| parse_list::<2, u64>(&s).context("--frames")).transpose()?;
            let report = thread_pool(jobs)?.install(|| commands::eval(&estimates, &m, frames.map(|[a, b]| (a, b))))?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Synth { config, out, seed } => {
            let mut spec = commands::load_scene_spec(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            commands::synth(&spec, &out)?;
            Ok(())
        }
        Command::Lift { estimates, manifest, epoch, out } => {
            let m = DatasetManifest::load(&manifest)?;
            std::fs::write(out, commands::lift_csv(&estimates, &m, epoch)?)?;
            Ok(())
        }
    }
}
