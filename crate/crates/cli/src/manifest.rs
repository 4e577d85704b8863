use std::fs;
use std::path::{Path, PathBuf};

use motionparse::geometry::{CameraIntrinsics, Pose};
use motionparse::imaging::{Field, Mask};
use motionparse::{io, Error, Result};
use serde::{Deserialize, Serialize};

/// Inputs of one frame pair. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub intrinsics: PathBuf,
    pub target: PathBuf,
    pub source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo: Option<StereoEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default = "default_profile")]
    pub profile: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StereoEntry {
    pub image: PathBuf,
    pub baseline: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_t: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_s: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_t_to_s: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_s_to_t: Option<PathBuf>,
    /// Target-to-source pose, one line of 12 numbers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving: Option<PathBuf>,
}

fn default_profile() -> String {
    "mono".to_string()
}

/// Ground truth read from disk.
pub struct LoadedTruth {
    pub depth_t: Field,
    pub depth_s: Field,
    pub flow_t_to_s: Field,
    pub flow_s_to_t: Field,
    pub pose: Pose,
    pub moving: Option<Mask>,
}

/// A manifest with all referenced inputs read.
pub struct Loaded {
    pub manifest: Manifest,
    pub intrinsics: CameraIntrinsics,
    pub target: Field,
    pub source: Field,
    pub stereo: Option<(Field, f64)>,
    base: PathBuf,
}

fn json_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + e.column().saturating_sub(1)) as u64
}

/// Luma of an RGB image; single-channel images pass through.
pub fn grayscale(image: Field) -> Result<Field> {
    match image.channels() {
        1 => Ok(image),
        3 => Ok(Field::from_fn(image.width(), image.height(), |x, y| {
            let p = image.pixel(x, y);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })),
        c => Err(Error::Domain(format!("images have 1 or 3 channels, got {c}"))),
    }
}

/// Reads an image from PNG or PFM, converted to grayscale.
pub fn read_gray(path: &Path) -> Result<Field> {
    let image = if is_png(path) {
        io::read_image(path)?
    } else {
        io::read_pfm(path)?
    };
    grayscale(image)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path)?;
    let poses = io::parse_poses(&text)?;
    match poses.as_slice() {
        [p] => Ok(*p),
        other => Err(Error::Domain(format!(
            "{}: expected one pose, found {}",
            path.display(),
            other.len()
        ))),
    }
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: json_offset(&text, &e),
            message: format!("manifest: {e}"),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &Path| base.join(p);
        let intrinsics = CameraIntrinsics::parse(&fs::read_to_string(resolve(&manifest.intrinsics))?)?;
        let target = read_gray(&resolve(&manifest.target))?;
        let source = read_gray(&resolve(&manifest.source))?;
        intrinsics.check_field(&target, "target image")?;
        intrinsics.check_field(&source, "source image")?;
        let stereo = match &manifest.stereo {
            Some(s) => {
                if s.baseline.is_nan() || s.baseline <= 0.0 {
                    return Err(Error::Domain(format!(
                        "stereo baseline must be > 0, got {}",
                        s.baseline
                    )));
                }
                let image = read_gray(&resolve(&s.image))?;
                intrinsics.check_field(&image, "stereo image")?;
                Some((image, s.baseline))
            }
            None => None,
        };
        if manifest.profile == "stereo" && stereo.is_none() {
            return Err(Error::Domain(
                "the stereo profile needs a stereo entry in the manifest".into(),
            ));
        }
        Ok(Self {
            manifest,
            intrinsics,
            target,
            source,
            stereo,
            base,
        })
    }

    fn required(&self, entry: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        entry
            .as_ref()
            .map(|p| self.base.join(p))
            .ok_or_else(|| Error::Domain(format!("manifest has no ground-truth {what}")))
    }

    pub fn truth(&self) -> Result<LoadedTruth> {
        let gt = self.manifest.ground_truth.clone().unwrap_or_default();
        let k = &self.intrinsics;
        let depth_t = io::read_depth_any(&self.required(&gt.depth_t, "depth_t")?)?.0;
        let depth_s = io::read_depth_any(&self.required(&gt.depth_s, "depth_s")?)?.0;
        let flow_t_to_s = io::read_flow_any(&self.required(&gt.flow_t_to_s, "flow_t_to_s")?)?.0;
        let flow_s_to_t = io::read_flow_any(&self.required(&gt.flow_s_to_t, "flow_s_to_t")?)?.0;
        for (f, what) in [
            (&depth_t, "depth_t"),
            (&depth_s, "depth_s"),
            (&flow_t_to_s, "flow_t_to_s"),
            (&flow_s_to_t, "flow_s_to_t"),
        ] {
            k.check_field(f, what)?;
        }
        let pose = read_pose(&self.required(&gt.pose, "pose")?)?;
        let moving = match &gt.moving {
            Some(p) => Some(io::read_mask(&self.base.join(p))?),
            None => None,
        };
        Ok(LoadedTruth {
            depth_t,
            depth_s,
            flow_t_to_s,
            flow_s_to_t,
            pose,
            moving,
        })
    }
}
