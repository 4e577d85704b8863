use std::fs;
use std::path::{Path, PathBuf};

use motionparse::geometry::{Pose, Twist};
use motionparse::hmp::{self, HmpInputs, SEGMENTATION_THRESHOLD};
use motionparse::imaging::{build_pyramid, Field, Mask};
use motionparse::losses::{evaluate_pair, EvalOptions, LossWeights, PairFrames, PairPyramids, StereoPyramid};
use motionparse::metrics::{self, OdometryOptions, SceneFlowFields};
use motionparse::optimizer::{run_schedule, Frames, SceneState, StageSchedule};
use motionparse::synthoracle::{random_moving_box_scene_with, random_static_scene, SyntheticScene};
use motionparse::{io, Error, Result};
use serde_json::{json, Value};

use crate::manifest::{GroundTruth, Loaded, Manifest, StereoEntry};

/// Initial raw depth of the smooth start state (depth 5 everywhere).
pub const INITIAL_RAW_DEPTH: f64 = 5.0;

/// Default box half-size range of `synth`, as fractions of the image size.
const BOX_FRACTION: (f64, f64) = (11.0 / 64.0, 14.0 / 64.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SceneKind {
    Static,
    MovingBox,
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

pub fn synth(scene: SceneKind, seed: u64, size: usize, stereo_baseline: Option<f64>, out: &Path) -> Result<Value> {
    let mut s: SyntheticScene = match scene {
        SceneKind::Static => {
            if size != 64 {
                return Err(Error::Domain("static scenes are 64x64".into()));
            }
            random_static_scene(seed)?
        }
        SceneKind::MovingBox => random_moving_box_scene_with(seed, size, BOX_FRACTION)?,
    };
    if let Some(b) = stereo_baseline {
        s = s.with_stereo(b)?;
    }
    create_dir(out)?;
    fs::write(out.join("intrinsics.txt"), s.intrinsics.to_text())?;
    fs::write(out.join("pose.txt"), io::format_poses(&[s.pose]))?;
    io::write_pfm(&out.join("target.pfm"), &s.target)?;
    io::write_pfm(&out.join("source.pfm"), &s.source)?;
    io::write_image(&out.join("target.png"), &s.target)?;
    io::write_image(&out.join("source.png"), &s.source)?;
    io::write_pfm(&out.join("depth_t.pfm"), &s.depth_t)?;
    io::write_pfm(&out.join("depth_s.pfm"), &s.depth_s)?;
    io::write_flo(&out.join("flow_t_to_s.flo"), &s.flow_t_to_s)?;
    io::write_flo(&out.join("flow_s_to_t.flo"), &s.flow_s_to_t)?;
    io::write_mask(&out.join("moving.png"), &s.moving)?;
    io::write_mask(&out.join("occluded.png"), &s.occluded)?;
    let stereo = match &s.stereo {
        Some(st) => {
            io::write_pfm(&out.join("stereo.pfm"), &st.image)?;
            Some(StereoEntry {
                image: "stereo.pfm".into(),
                baseline: st.baseline,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        intrinsics: "intrinsics.txt".into(),
        target: "target.pfm".into(),
        source: "source.pfm".into(),
        profile: if stereo.is_some() { "stereo" } else { "mono" }.into(),
        stereo,
        ground_truth: Some(GroundTruth {
            depth_t: Some("depth_t.pfm".into()),
            depth_s: Some("depth_s.pfm".into()),
            flow_t_to_s: Some("flow_t_to_s.flo".into()),
            flow_s_to_t: Some("flow_s_to_t.flo".into()),
            pose: Some("pose.txt".into()),
            moving: Some("moving.png".into()),
        }),
    };
    write_json(&out.join("manifest.json"), &to_json(&manifest))?;
    let om = s.object_motion();
    Ok(json!({
        "scene": match scene { SceneKind::Static => "static", SceneKind::MovingBox => "moving-box" },
        "seed": seed,
        "width": s.intrinsics.width,
        "height": s.intrinsics.height,
        "moving_pixels": s.moving.count(),
        "occluded_pixels": s.occluded.count(),
        "object_motion": [om.x, om.y, om.z],
        "pose": s.pose.to_row().to_vec(),
    }))
}

fn mask_stats(m_d: &Field, mask: &Mask) -> (f64, f64) {
    let norm = m_d.norm();
    let vals: Vec<f64> = (0..norm.pixel_count())
        .filter(|&i| mask.data()[i])
        .map(|i| norm.data()[i])
        .collect();
    let max = vals.iter().copied().fold(0.0, f64::max);
    let mean = if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    (max, mean)
}

pub fn parse(manifest: &Path, alpha_s: f64, threshold: f64, out: &Path) -> Result<Value> {
    let loaded = Loaded::read(manifest)?;
    let gt = loaded.truth()?;
    let result = hmp::parse(&HmpInputs {
        depth_t: &gt.depth_t,
        depth_s: &gt.depth_s,
        flow_t_to_s: &gt.flow_t_to_s,
        flow_s_to_t: &gt.flow_s_to_t,
        pose: &gt.pose,
        intrinsics: &loaded.intrinsics,
        alpha_s,
    })?;
    let seg = result.segmentation(threshold);
    let visible = Mask::from_fn(result.v.width(), result.v.height(), |x, y| result.v.at(x, y) > 0.5);
    create_dir(out)?;
    io::write_mask(&out.join("visibility.png"), &visible)?;
    io::write_mask(&out.join("segmentation.png"), &seg)?;
    io::write_pfm(&out.join("moving_soft.pfm"), &result.s)?;
    io::write_pfm(&out.join("m_d.pfm"), &result.m_d)?;
    io::write_pfm(&out.join("m_b.pfm"), &result.m_b)?;
    let (max_md, mean_md) = mask_stats(&result.m_d, &result.valid);
    let mut summary = json!({
        "pixels": result.v.pixel_count(),
        "visible_pixels": visible.count(),
        "valid_pixels": result.valid.count(),
        "segmented_pixels": seg.count(),
        "threshold": threshold,
        "alpha_s": alpha_s,
        "max_dynamic_motion": max_md,
        "mean_dynamic_motion": mean_md,
    });
    if let Some(moving) = &gt.moving {
        summary["segmentation_iou"] = json!(seg.iou(moving));
    }
    Ok(summary)
}

/// Loss weights from an explicit vector or the named stage of a profile.
pub fn stage_weights(profile: &str, stage: &str, weights: Option<&[f64]>) -> Result<(LossWeights, f64)> {
    let schedule = StageSchedule::profile(profile)?;
    let st = schedule.stages.iter().find(|s| s.name == stage).ok_or_else(|| {
        let names: Vec<&str> = schedule.stages.iter().map(|s| s.name.as_str()).collect();
        Error::Domain(format!(
            "unknown stage '{stage}' (expected one of {})",
            names.join(", ")
        ))
    })?;
    let w = match weights {
        Some(v) => {
            let arr: [f64; 7] = v
                .try_into()
                .map_err(|_| Error::Domain(format!("--weights needs 7 values, got {}", v.len())))?;
            LossWeights::from_vector(arr)?.with_stereo(st.weights.lambda_cvs, st.weights.lambda_cs)
        }
        None => st.weights,
    };
    Ok((w, st.alpha_s))
}

fn stereo_pose(baseline: f64) -> Pose {
    Pose::from_translation([-baseline, 0.0, 0.0])
}

pub fn loss(
    manifest: &Path,
    stage: &str,
    weights: Option<&[f64]>,
    alpha_s: Option<f64>,
    all_terms: bool,
) -> Result<Value> {
    let loaded = Loaded::read(manifest)?;
    let gt = loaded.truth()?;
    let (w, stage_alpha) = stage_weights(&loaded.manifest.profile, stage, weights)?;
    let alpha_s = alpha_s.unwrap_or(stage_alpha);
    let target = build_pyramid(&loaded.target)?;
    let source = build_pyramid(&loaded.source)?;
    let pair = PairPyramids::build(&PairFrames {
        target: &target,
        source: &source,
        depth_t: &gt.depth_t,
        depth_s: &gt.depth_s,
        flow_t_to_s: &gt.flow_t_to_s,
        flow_s_to_t: &gt.flow_s_to_t,
        pose: &gt.pose,
        intrinsics: &loaded.intrinsics,
        alpha_s,
    })?;
    let stereo = match &loaded.stereo {
        Some((image, b)) if w.lambda_cvs > 0.0 || w.lambda_cs > 0.0 => {
            Some(StereoPyramid::build(image, &stereo_pose(*b))?)
        }
        _ => None,
    };
    let options = EvalOptions {
        all_terms,
        ..EvalOptions::default()
    };
    let breakdown = evaluate_pair(&pair, stereo.as_ref(), &w, options, None)?;
    let mut out = breakdown.to_json();
    out["weights"] = json!(w.vector().to_vec());
    out["alpha_s"] = json!(alpha_s);
    Ok(out)
}

pub struct OptimizeArgs<'a> {
    pub manifest: &'a Path,
    pub profile: Option<&'a str>,
    pub max_iters: Option<usize>,
    pub lr: Option<f64>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn optimize(args: &OptimizeArgs<'_>) -> Result<Value> {
    let loaded = Loaded::read(args.manifest)?;
    let profile = args.profile.unwrap_or(&loaded.manifest.profile);
    let mut schedule = StageSchedule::profile(profile)?;
    if let Some(n) = args.max_iters {
        schedule = schedule.with_max_iters(n);
    }
    if let Some(lr) = args.lr {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Domain(format!("--lr must be positive, got {lr}")));
        }
        schedule = schedule.with_step_scale(lr);
    }
    let mut frames = Frames::from_images(&loaded.target, &loaded.source, &loaded.intrinsics)?;
    if profile == "stereo" {
        let (image, b) = loaded
            .stereo
            .as_ref()
            .ok_or_else(|| Error::Domain("the stereo profile needs a stereo entry in the manifest".into()))?;
        frames.stereo = Some(StereoPyramid::build(image, &stereo_pose(*b))?);
    }
    let k = &loaded.intrinsics;
    let init = SceneState::smooth_init(k.width, k.height, INITIAL_RAW_DEPTH)?;
    let (state, traces) = run_schedule(&frames, &schedule, init)?;

    let (depth_t, depth_s) = state.depths(schedule.gauge);
    let pose = state.pose()?;
    let result = hmp::parse(&HmpInputs {
        depth_t: &depth_t,
        depth_s: &depth_s,
        flow_t_to_s: &state.flow_t_to_s,
        flow_s_to_t: &state.flow_s_to_t,
        pose: &pose,
        intrinsics: k,
        alpha_s: state.alpha_s,
    })?;
    let seg = result.segmentation(SEGMENTATION_THRESHOLD);
    let visible = Mask::from_fn(k.width, k.height, |x, y| result.v.at(x, y) > 0.5);

    create_dir(args.out)?;
    io::write_pfm(&args.out.join("depth_t.pfm"), &depth_t)?;
    io::write_pfm(&args.out.join("depth_s.pfm"), &depth_s)?;
    io::write_flo(&args.out.join("flow_t_to_s.flo"), &state.flow_t_to_s)?;
    io::write_flo(&args.out.join("flow_s_to_t.flo"), &state.flow_s_to_t)?;
    io::write_mask(&args.out.join("segmentation.png"), &seg)?;
    io::write_mask(&args.out.join("visibility.png"), &visible)?;
    io::write_pfm(&args.out.join("moving_soft.pfm"), &result.s)?;
    fs::write(args.out.join("pose.txt"), io::format_poses(&[pose]))?;
    let trace = json!({
        "profile": schedule.profile,
        "seed": args.seed,
        "stages": to_json(&traces),
    });
    write_json(&args.out.join("trace.json"), &trace)?;

    let twist: Twist = state.pose_twist;
    Ok(json!({
        "profile": schedule.profile,
        "seed": args.seed,
        "pose_twist": twist.to_vec(),
        "final_losses": traces.iter().map(|t| json!({
            "stage": t.name,
            "steps": t.steps,
            "stop": to_json(&t.stop),
            "loss": t.losses.last().copied().unwrap_or(f64::NAN),
        })).collect::<Vec<_>>(),
        "segmented_pixels": seg.count(),
    }))
}

fn read_valid(path: Option<&Path>) -> Result<Option<Mask>> {
    path.map(io::read_mask).transpose()
}

fn and_masks(a: Mask, b: Option<Mask>) -> Result<Mask> {
    match b {
        Some(b) => {
            if a.width() != b.width() || a.height() != b.height() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", a.width(), a.height()),
                    actual: format!("{}x{}", b.width(), b.height()),
                });
            }
            Ok(a.and(&b))
        }
        None => Ok(a),
    }
}

pub fn eval_depth(pred: &Path, gt: &Path, valid: Option<&Path>, median_scale: bool) -> Result<Value> {
    let (p, _) = io::read_depth_any(pred)?;
    let (g, gt_valid) = io::read_depth_any(gt)?;
    let mask = and_masks(gt_valid, read_valid(valid)?)?;
    Ok(to_json(&metrics::eval_depth(&p, &g, Some(&mask), median_scale)?))
}

pub fn eval_flow(pred: &Path, gt: &Path, valid: Option<&Path>) -> Result<Value> {
    let (p, _) = io::read_flow_any(pred)?;
    let (g, gt_valid) = io::read_flow_any(gt)?;
    let mask = and_masks(gt_valid, read_valid(valid)?)?;
    Ok(to_json(&metrics::eval_flow(&p, &g, Some(&mask))?))
}

pub fn eval_seg(pred: &Path, gt: &Path) -> Result<Value> {
    Ok(to_json(&metrics::eval_segmentation(
        &io::read_mask(pred)?,
        &io::read_mask(gt)?,
    )?))
}

pub struct SceneFlowPaths {
    pub pred_d1: PathBuf,
    pub pred_d2: PathBuf,
    pub pred_flow: PathBuf,
    pub gt_d1: PathBuf,
    pub gt_d2: PathBuf,
    pub gt_flow: PathBuf,
    pub fg_mask: Option<PathBuf>,
}

pub fn eval_sceneflow(paths: &SceneFlowPaths) -> Result<Value> {
    let (pd1, _) = io::read_depth_any(&paths.pred_d1)?;
    let (pd2, _) = io::read_depth_any(&paths.pred_d2)?;
    let (pf, _) = io::read_flow_any(&paths.pred_flow)?;
    let (gd1, v1) = io::read_depth_any(&paths.gt_d1)?;
    let (gd2, v2) = io::read_depth_any(&paths.gt_d2)?;
    let (gf, vf) = io::read_flow_any(&paths.gt_flow)?;
    let valid = and_masks(and_masks(vf, Some(v1))?, Some(v2))?;
    let fg = read_valid(paths.fg_mask.as_deref())?;
    let report = metrics::eval_sceneflow(
        &SceneFlowFields {
            d1: &pd1,
            d2: &pd2,
            flow: &pf,
        },
        &SceneFlowFields {
            d1: &gd1,
            d2: &gd2,
            flow: &gf,
        },
        Some(&valid),
        fg.as_ref(),
    )?;
    Ok(to_json(&report))
}

pub fn eval_odom(pred: &Path, gt: &Path, per_length: Option<f64>) -> Result<Value> {
    let p = io::parse_poses(&fs::read_to_string(pred)?)?;
    let g = io::parse_poses(&fs::read_to_string(gt)?)?;
    Ok(to_json(&metrics::eval_odometry(
        &p,
        &g,
        OdometryOptions { per_length },
    )?))
}
