//! Dataset layout on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use surflow_core::geom::{CalibratedRig, PointCloud};
use surflow_core::io;
use surflow_core::raster::Field;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

/// Paths are relative to the manifest's directory. In patterns, `{epoch}`
/// expands to the six-digit zero-padded frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub image_dir: PathBuf,
    pub image_pattern: String,
    pub cloud_dir: PathBuf,
    pub cloud_pattern: String,
    pub calibration: PathBuf,
    pub first_frame: u64,
    pub last_frame: u64,
    pub frame_interval: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Crop>,
    /// Ground-truth rasters: `flow_fwd_{epoch}.dflo`, `flow_bwd_{epoch}.dflo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_dir: Option<PathBuf>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub fn expand(pattern: &str, epoch: u64) -> String {
    pattern.replace("{epoch}", &format!("{epoch:06}"))
}

impl DatasetManifest {
    /// Standard layout used by `synth`.
    pub fn standard(first_frame: u64, last_frame: u64, frame_interval: f64) -> Self {
        Self {
            image_dir: "images".into(),
            image_pattern: "{epoch}.png".into(),
            cloud_dir: "clouds".into(),
            cloud_pattern: "{epoch}.dpc".into(),
            calibration: "calib.json".into(),
            first_frame,
            last_frame,
            frame_interval,
            crop: None,
            gt_dir: Some("gt".into()),
            root: PathBuf::new(),
        }
    }

    /// Accepts the manifest file or the directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)
            .with_context(|| format!("reading manifest {}", file.display()))?;
        let mut m: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", file.display()))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.last_frame < self.first_frame {
            bail!("manifest frame range {}..={} is empty", self.first_frame, self.last_frame);
        }
        if !(self.frame_interval > 0.0) {
            bail!("manifest frame_interval must be positive");
        }
        for p in [&self.image_pattern, &self.cloud_pattern] {
            if !p.contains("{epoch}") {
                bail!("pattern `{p}` lacks an {{epoch}} placeholder");
            }
        }
        Ok(())
    }

    /// Every referenced epoch has an image and a cloud file.
    pub fn check_files(&self) -> Result<()> {
        for e in self.epochs() {
            for p in [self.image_path(e), self.cloud_path(e)] {
                if !p.is_file() {
                    bail!("epoch {e}: missing {}", p.display());
                }
            }
        }
        Ok(())
    }

    /// Crop (or full image) sides must be divisible by `2^(levels - 1)`.
    pub fn check_divisible(&self, width: usize, height: usize, levels: usize) -> Result<()> {
        let (w, h) = self.crop.map_or((width, height), |c| (c.width, c.height));
        let k = 1usize << levels.saturating_sub(1);
        if w % k != 0 || h % k != 0 {
            bail!("frame size {w}x{h} is not divisible by {k} ({levels} pyramid levels)");
        }
        Ok(())
    }

    pub fn epochs(&self) -> std::ops::RangeInclusive<u64> {
        self.first_frame..=self.last_frame
    }

    pub fn image_path(&self, epoch: u64) -> PathBuf {
        self.root.join(&self.image_dir).join(expand(&self.image_pattern, epoch))
    }

    pub fn cloud_path(&self, epoch: u64) -> PathBuf {
        self.root.join(&self.cloud_dir).join(expand(&self.cloud_pattern, epoch))
    }

    pub fn gt_path(&self, name: &str, epoch: u64) -> Option<PathBuf> {
        self.gt_dir
            .as_ref()
            .map(|d| self.root.join(d).join(format!("{name}_{epoch:06}.dflo")))
    }

    /// Calibration adjusted for the crop.
    pub fn rig(&self) -> Result<CalibratedRig> {
        let path = self.root.join(&self.calibration);
        let rig = io::read_rig(&path).with_context(|| format!("reading calibration {}", path.display()))?;
        Ok(match self.crop {
            Some(c) => rig.cropped(c.u0, c.v0, c.width, c.height)?,
            None => rig,
        })
    }

    /// Grayscale image of `epoch`, cropped.
    pub fn image(&self, epoch: u64) -> Result<Field> {
        let path = self.image_path(epoch);
        let img = io::read_png_gray(&path)
            .with_context(|| format!("epoch {epoch}: reading image {}", path.display()))?;
        Ok(match self.crop {
            Some(c) => img
                .crop(c.u0, c.v0, c.width, c.height)
                .with_context(|| format!("epoch {epoch}: cropping image"))?,
            None => img,
        })
    }

    pub fn cloud(&self, epoch: u64) -> Result<PointCloud> {
        let path = self.cloud_path(epoch);
        io::read_cloud(&path, epoch).with_context(|| format!("epoch {epoch}: reading cloud {}", path.display()))
    }

    /// Ground-truth raster if the dataset has one, cropped.
    pub fn gt(&self, name: &str, epoch: u64) -> Result<Option<Field>> {
        let Some(path) = self.gt_path(name, epoch).filter(|p| p.is_file()) else {
            return Ok(None);
        };
        let f = io::read_dflo(&path).with_context(|| format!("epoch {epoch}: reading {}", path.display()))?;
        Ok(Some(match self.crop {
            Some(c) => f.crop(c.u0, c.v0, c.width, c.height)?,
            None => f,
        }))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
