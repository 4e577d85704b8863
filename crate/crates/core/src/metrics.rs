//! Evaluation suites for depth, flow, scene flow, odometry and segmentation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{Field, Mask};

/// Absolute flow outlier threshold in pixels.
pub const OUTLIER_ABS_PX: f64 = 3.0;
/// Relative flow outlier threshold as a fraction of the ground-truth magnitude.
pub const OUTLIER_REL: f64 = 0.05;
/// Length of the snippets used for trajectory error.
pub const ATE_SNIPPET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthEvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowEvalReport {
    pub epe: f64,
    pub f1_outlier_rate: f64,
}

/// A score over all pixels plus background / foreground splits.
///
/// The splits are `None` when no foreground mask was supplied or the
/// corresponding region is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Split {
    pub bg: Option<f64>,
    pub fg: Option<f64>,
    pub all: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SceneFlowScores {
    pub d1: Split,
    pub d2: Split,
    pub fl: Split,
}

/// Scene flow scores in two forms: mean absolute error, and the fraction of
/// outliers (error above 3 px and above 5% of the ground truth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SceneFlowReport {
    pub mean_abs_error: SceneFlowScores,
    pub outlier_rate: SceneFlowScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdometryReport {
    pub ate_5frame: f64,
    pub t_err: f64,
    pub r_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegReport {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
}

/// Options for odometry evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct OdometryOptions {
    /// When set, `t_err` and `r_err` are expressed per this many units of
    /// ground-truth path length instead of per frame pair.
    pub per_length: Option<f64>,
}

fn valid_indices(n: usize, valid: Option<&Mask>) -> Vec<usize> {
    match valid {
        Some(m) => (0..n).filter(|&i| m.data()[i]).collect(),
        None => (0..n).collect(),
    }
}

fn check_mask(field: &Field, mask: Option<&Mask>, what: &str) -> Result<()> {
    if let Some(m) = mask {
        if m.width() != field.width() || m.height() != field.height() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", field.width(), field.height()),
                actual: format!("{what} {}x{}", m.width(), m.height()),
            });
        }
    }
    Ok(())
}

/// Median of a non-empty slice; even counts average the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("median of an empty set"));
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if v.len() % 2 == 1 {
        return Ok(upper);
    }
    let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}

/// Depth error statistics over valid pixels, optionally after median scaling.
pub fn eval_depth(pred: &Field, gt: &Field, valid: Option<&Mask>, median_scale: bool) -> Result<DepthEvalReport> {
    pred.check_channels(1, "predicted depth")?;
    gt.check_channels(1, "ground-truth depth")?;
    pred.check_grid(gt, "predicted depth")?;
    check_mask(gt, valid, "valid mask")?;
    let idx = valid_indices(gt.pixel_count(), valid);
    if idx.is_empty() {
        return Err(Error::domain("no valid pixels for depth evaluation"));
    }
    let (p, g) = (pred.data(), gt.data());
    for &i in &idx {
        if !(g[i] > 0.0) || !g[i].is_finite() {
            return Err(Error::domain(format!(
                "ground-truth depth {} at pixel {i} is not positive",
                g[i]
            )));
        }
        if !(p[i] > 0.0) || !p[i].is_finite() {
            return Err(Error::domain(format!(
                "predicted depth {} at pixel {i} is not positive",
                p[i]
            )));
        }
    }
    let scale = if median_scale {
        let pv: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let gv: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        median(&gv)? / median(&pv)?
    } else {
        1.0
    };

    let n = idx.len() as f64;
    let mut acc = [0.0f64; 4];
    let mut within = [0usize; 3];
    for &i in &idx {
        let (d, t) = (p[i] * scale, g[i]);
        let e = t - d;
        acc[0] += e.abs() / t;
        acc[1] += e * e / t;
        acc[2] += e * e;
        let le = t.ln() - d.ln();
        acc[3] += le * le;
        let ratio = (d / t).max(t / d);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    Ok(DepthEvalReport {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
    })
}

/// True when an error counts as an outlier against a reference magnitude.
pub fn is_outlier(err: f64, reference: f64) -> bool {
    err > OUTLIER_ABS_PX && err > OUTLIER_REL * reference
}

fn endpoint(pred: &Field, gt: &Field, i: usize) -> (f64, f64) {
    let (p, g) = (pred.data(), gt.data());
    let (du, dv) = (p[2 * i] - g[2 * i], p[2 * i + 1] - g[2 * i + 1]);
    (du.hypot(dv), g[2 * i].hypot(g[2 * i + 1]))
}

/// Average endpoint error and outlier rate of a flow field.
pub fn eval_flow(pred: &Field, gt: &Field, valid: Option<&Mask>) -> Result<FlowEvalReport> {
    pred.check_channels(2, "predicted flow")?;
    gt.check_channels(2, "ground-truth flow")?;
    pred.check_grid(gt, "predicted flow")?;
    check_mask(gt, valid, "valid mask")?;
    let idx = valid_indices(gt.pixel_count(), valid);
    if idx.is_empty() {
        return Err(Error::domain("no valid pixels for flow evaluation"));
    }
    let mut epe = 0.0;
    let mut outliers = 0usize;
    for &i in &idx {
        let (err, mag) = endpoint(pred, gt, i);
        epe += err;
        if is_outlier(err, mag) {
            outliers += 1;
        }
    }
    let n = idx.len() as f64;
    Ok(FlowEvalReport {
        epe: epe / n,
        f1_outlier_rate: outliers as f64 / n,
    })
}

struct SplitAcc {
    sum: [f64; 2],
    count: [usize; 2],
}

impl SplitAcc {
    fn new() -> Self {
        SplitAcc {
            sum: [0.0; 2],
            count: [0; 2],
        }
    }

    fn push(&mut self, fg: bool, value: f64) {
        let k = fg as usize;
        self.sum[k] += value;
        self.count[k] += 1;
    }

    fn finish(&self, with_split: bool) -> Split {
        let part = |k: usize| (with_split && self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64);
        let n = self.count[0] + self.count[1];
        Split {
            bg: part(0),
            fg: part(1),
            all: (self.sum[0] + self.sum[1]) / n as f64,
        }
    }
}

/// Scene flow inputs: disparity of the first frame, disparity of the second
/// frame mapped into the first, and optical flow.
#[derive(Debug, Clone, Copy)]
pub struct SceneFlowFields<'a> {
    pub d1: &'a Field,
    pub d2: &'a Field,
    pub flow: &'a Field,
}

/// Scene flow scores split by a foreground mask.
pub fn eval_sceneflow(
    pred: &SceneFlowFields<'_>,
    gt: &SceneFlowFields<'_>,
    valid: Option<&Mask>,
    fg_mask: Option<&Mask>,
) -> Result<SceneFlowReport> {
    for (f, what) in [
        (pred.d1, "predicted d1"),
        (pred.d2, "predicted d2"),
        (gt.d1, "ground-truth d1"),
        (gt.d2, "ground-truth d2"),
    ] {
        f.check_channels(1, what)?;
        f.check_grid(gt.flow, what)?;
    }
    pred.flow.check_channels(2, "predicted flow")?;
    gt.flow.check_channels(2, "ground-truth flow")?;
    pred.flow.check_grid(gt.flow, "predicted flow")?;
    check_mask(gt.flow, valid, "valid mask")?;
    check_mask(gt.flow, fg_mask, "foreground mask")?;
    let idx = valid_indices(gt.flow.pixel_count(), valid);
    if idx.is_empty() {
        return Err(Error::domain("no valid pixels for scene flow evaluation"));
    }

    let mut mae = [SplitAcc::new(), SplitAcc::new(), SplitAcc::new()];
    let mut out = [SplitAcc::new(), SplitAcc::new(), SplitAcc::new()];
    for &i in &idx {
        let fg = fg_mask.is_some_and(|m| m.data()[i]);
        let e1 = (pred.d1.data()[i] - gt.d1.data()[i]).abs();
        let e2 = (pred.d2.data()[i] - gt.d2.data()[i]).abs();
        let (ef, mag) = endpoint(pred.flow, gt.flow, i);
        let refs = [gt.d1.data()[i].abs(), gt.d2.data()[i].abs(), mag];
        for (k, e) in [e1, e2, ef].into_iter().enumerate() {
            mae[k].push(fg, e);
            out[k].push(fg, if is_outlier(e, refs[k]) { 1.0 } else { 0.0 });
        }
    }
    let split = fg_mask.is_some();
    let scores = |a: &[SplitAcc; 3]| SceneFlowScores {
        d1: a[0].finish(split),
        d2: a[1].finish(split),
        fl: a[2].finish(split),
    };
    Ok(SceneFlowReport {
        mean_abs_error: scores(&mae),
        outlier_rate: scores(&out),
    })
}

fn rotation_angle(p: &Pose) -> f64 {
    let c = ((p.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Trajectory and relative motion errors of camera-to-world poses.
///
/// ATE is computed on every window of five consecutive frames after shifting
/// the predicted window so its first position matches the ground truth, and
/// averaged over windows. Relative errors compare consecutive frame pairs.
pub fn eval_odometry(pred: &[Pose], gt: &[Pose], options: OdometryOptions) -> Result<OdometryReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} poses", gt.len()),
            actual: format!("{} poses", pred.len()),
        });
    }
    if gt.len() < ATE_SNIPPET {
        return Err(Error::domain(format!(
            "trajectory of {} frames is shorter than the {ATE_SNIPPET}-frame snippet",
            gt.len()
        )));
    }

    let windows = gt.len() - ATE_SNIPPET + 1;
    let mut ate = 0.0;
    for s in 0..windows {
        let offset = gt[s].translation - pred[s].translation;
        let sq: f64 = (s..s + ATE_SNIPPET)
            .map(|j| (gt[j].translation - (pred[j].translation + offset)).norm_squared())
            .sum();
        ate += sq.sqrt() / ATE_SNIPPET as f64;
    }
    ate /= windows as f64;

    let pairs = gt.len() - 1;
    let mut t_sq = 0.0;
    let mut r_sum = 0.0;
    let mut path = 0.0;
    for i in 0..pairs {
        let rel_gt = gt[i].inverse().compose(&gt[i + 1]);
        let rel_pred = pred[i].inverse().compose(&pred[i + 1]);
        t_sq += (rel_gt.translation - rel_pred.translation).norm_squared();
        r_sum += (rotation_angle(&rel_pred) - rotation_angle(&rel_gt)).abs();
        path += rel_gt.translation.norm();
    }
    let mut t_err = t_sq.sqrt() / pairs as f64;
    let mut r_err = r_sum / pairs as f64;
    if let Some(length) = options.per_length {
        if !(length > 0.0) {
            return Err(Error::domain("normalizing length must be positive"));
        }
        if !(path > 0.0) {
            return Err(Error::domain("ground-truth trajectory has zero length"));
        }
        let k = pairs as f64 * length / path;
        t_err *= k;
        r_err *= k;
    }
    Ok(OdometryReport {
        ate_5frame: ate,
        t_err,
        r_err,
    })
}

/// Binary segmentation scores with background and foreground as the two classes.
///
/// Classes absent from the ground truth are left out of the per-class means.
pub fn eval_segmentation(pred: &Mask, gt: &Mask) -> Result<SegReport> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.width(), gt.height()),
            actual: format!("{}x{}", pred.width(), pred.height()),
        });
    }
    if gt.data().is_empty() {
        return Err(Error::domain("empty segmentation masks"));
    }
    // n[i][j]: pixels of ground-truth class i predicted as class j
    let mut n = [[0usize; 2]; 2];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        n[g as usize][p as usize] += 1;
    }
    let t = [n[0][0] + n[0][1], n[1][0] + n[1][1]];
    let total = (t[0] + t[1]) as f64;
    let present: Vec<usize> = (0..2).filter(|&i| t[i] > 0).collect();
    let n_cl = present.len() as f64;

    let iou = |i: usize| {
        let predicted = n[0][i] + n[1][i];
        n[i][i] as f64 / (t[i] + predicted - n[i][i]) as f64
    };
    Ok(SegReport {
        pixel_acc: (n[0][0] + n[1][1]) as f64 / total,
        mean_acc: present.iter().map(|&i| n[i][i] as f64 / t[i] as f64).sum::<f64>() / n_cl,
        mean_iou: present.iter().map(|&i| iou(i)).sum::<f64>() / n_cl,
        fw_iou: present.iter().map(|&i| t[i] as f64 * iou(i)).sum::<f64>() / total,
    })
}
