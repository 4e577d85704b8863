//! Direct first-order optimization of per-pixel depth, camera motion and
//! optical flow under the loss stack, following the stage-wise schedule:
//! depth and pose alone, flow alone, then alternating refinement in which
//! each block is guided by the frozen other.
//!
//! The state is bidirectional: both frames carry a depth map and both
//! directions carry a flow field, so every pair term is evaluated from the
//! target to the source and from the source to the target (the latter
//! with the inverse pose).

use log::{debug, info};
use nalgebra::{Matrix6, Vector6};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{rigid_flow_field, CameraIntrinsics, Pose, PoseJacobian, Twist};
use crate::imaging::{avg_pool_2x2_adjoint, build_pyramid, Field, ImagePyramid, Mask};
use crate::losses::{
    evaluate_pair, pyramid_masks, sample_support, EvalOptions, LevelMasks, LossBreakdown, LossWeights, PairFrames,
    PairGradient, PairPyramids, StereoPyramid, STEREO_LAMBDA_CS, STEREO_LAMBDA_CVS, STEREO_LAMBDA_FC,
};

/// Upper bound of the decoded disparity.
pub const DISPARITY_CAP: f64 = 0.3;
/// Mask scale used once the independent stages are over.
pub const ALPHA_S_REFINE: f64 = 0.01;
/// Default relative depth smoothness relaxation of every stage.
pub const DEFAULT_DEPTH_RELAX: f64 = 0.0;
/// Default flow smoothness relaxation of every stage, in pixels.
pub const DEFAULT_FLOW_RELAX: f64 = 0.05;
/// Losses above this abort the schedule.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 / (0.3 sigmoid(x))` per pixel, before any normalization.
pub fn raw_depth(params: &Field) -> Field {
    params.map(|x| 1.0 / (DISPARITY_CAP * sigmoid(x)))
}

/// Decoded depth of one frame: raw depth divided by its spatial mean.
pub fn decode_depth(params: &Field) -> Field {
    let raw = raw_depth(params);
    let m = raw.mean();
    raw.scale(1.0 / m)
}

/// Parameters whose raw depth equals `raw` (every value must exceed
/// `1 / 0.3`).
pub fn encode_raw_depth(raw: &Field) -> Result<Field> {
    let floor = 1.0 / DISPARITY_CAP;
    if let Some(bad) = raw.data().iter().find(|d| !(d.is_finite() && **d > floor)) {
        return Err(Error::domain(format!(
            "raw depth must be finite and > {floor}, got {bad}"
        )));
    }
    Ok(raw.map(|d| {
        let s = 1.0 / (DISPARITY_CAP * d);
        (s / (1.0 - s)).ln()
    }))
}

/// How decoded depth fixes the monocular scale ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthGauge {
    /// Both depth maps are divided by their joint mean.
    MeanNormalized,
    /// Raw depth is used as is (scale fixed by a known stereo baseline).
    Metric,
}

/// Free variables of the direct optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    /// Unconstrained depth parameters of the target frame.
    pub depth_t: Field,
    /// Unconstrained depth parameters of the source frame.
    pub depth_s: Field,
    /// Target-to-source camera motion.
    pub pose_twist: Twist,
    pub flow_t_to_s: Field,
    pub flow_s_to_t: Field,
    pub alpha_s: f64,
}

impl SceneState {
    /// Constant depth `initial_raw_depth`, identity pose, zero flow.
    pub fn smooth_init(width: usize, height: usize, initial_raw_depth: f64) -> Result<Self> {
        let p = encode_raw_depth(&Field::filled(width, height, 1, initial_raw_depth))?;
        Ok(Self {
            depth_t: p.clone(),
            depth_s: p,
            pose_twist: [0.0; 6],
            flow_t_to_s: Field::new(width, height, 2),
            flow_s_to_t: Field::new(width, height, 2),
            alpha_s: 0.0,
        })
    }

    /// State whose decoded depths equal the given ones (up to the gauge).
    /// Under the mean gauge, raw depth is the input rescaled so its minimum
    /// is 5, and the translation is divided by the joint mean depth.
    pub fn from_ground_truth(
        depth_t: &Field,
        depth_s: &Field,
        pose: &Pose,
        flow_t_to_s: &Field,
        flow_s_to_t: &Field,
        gauge: DepthGauge,
    ) -> Result<Self> {
        let scale = match gauge {
            DepthGauge::Metric => 1.0,
            DepthGauge::MeanNormalized => {
                let lo = depth_t
                    .data()
                    .iter()
                    .chain(depth_s.data())
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                if !(lo > 0.0) {
                    return Err(Error::domain("ground-truth depth must be positive"));
                }
                5.0 / lo
            }
        };
        let mut pose = *pose;
        if gauge == DepthGauge::MeanNormalized {
            pose.translation /= joint_mean(depth_t, depth_s);
        }
        Ok(Self {
            depth_t: encode_raw_depth(&depth_t.scale(scale))?,
            depth_s: encode_raw_depth(&depth_s.scale(scale))?,
            pose_twist: pose.log(),
            flow_t_to_s: flow_t_to_s.clone(),
            flow_s_to_t: flow_s_to_t.clone(),
            alpha_s: 0.0,
        })
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_twist(&self.pose_twist)
    }

    /// Decoded target and source depth under `gauge`.
    pub fn depths(&self, gauge: DepthGauge) -> (Field, Field) {
        let (rt, rs) = (raw_depth(&self.depth_t), raw_depth(&self.depth_s));
        match gauge {
            DepthGauge::Metric => (rt, rs),
            DepthGauge::MeanNormalized => {
                let m = joint_mean(&rt, &rs);
                (rt.scale(1.0 / m), rs.scale(1.0 / m))
            }
        }
    }

    /// All parameters in a fixed order: target depth, source depth, twist,
    /// forward flow, backward flow.
    pub fn parameters(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        v.extend_from_slice(self.depth_t.data());
        v.extend_from_slice(self.depth_s.data());
        v.extend_from_slice(&self.pose_twist);
        v.extend_from_slice(self.flow_t_to_s.data());
        v.extend_from_slice(self.flow_s_to_t.data());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.depth_t.data().len() + self.depth_s.data().len() + 6 + 2 * self.flow_t_to_s.data().len()
    }

    /// Inverse of [`SceneState::parameters`].
    pub fn set_parameters(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.parameter_count()),
                actual: format!("{}", v.len()),
            });
        }
        let mut at = 0;
        for dst in [self.depth_t.data_mut(), self.depth_s.data_mut()] {
            let n = dst.len();
            dst.copy_from_slice(&v[at..at + n]);
            at += n;
        }
        self.pose_twist.copy_from_slice(&v[at..at + 6]);
        at += 6;
        for dst in [self.flow_t_to_s.data_mut(), self.flow_s_to_t.data_mut()] {
            let n = dst.len();
            dst.copy_from_slice(&v[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.depth_t.is_finite()
            && self.depth_s.is_finite()
            && self.pose_twist.iter().all(|x| x.is_finite())
            && self.flow_t_to_s.is_finite()
            && self.flow_s_to_t.is_finite()
    }
}

fn joint_mean(a: &Field, b: &Field) -> f64 {
    (a.data().iter().sum::<f64>() + b.data().iter().sum::<f64>()) / (a.data().len() + b.data().len()) as f64
}

/// Gradient with the shape of a [`SceneState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    pub depth_t: Field,
    pub depth_s: Field,
    pub pose_twist: Twist,
    pub flow_t_to_s: Field,
    pub flow_s_to_t: Field,
}

impl StateGradient {
    pub fn zeros_like(state: &SceneState) -> Self {
        let z = |f: &Field| Field::new(f.width(), f.height(), f.channels());
        Self {
            depth_t: z(&state.depth_t),
            depth_s: z(&state.depth_s),
            pose_twist: [0.0; 6],
            flow_t_to_s: z(&state.flow_t_to_s),
            flow_s_to_t: z(&state.flow_s_to_t),
        }
    }

    /// Same order as [`SceneState::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.depth_t.data());
        v.extend_from_slice(self.depth_s.data());
        v.extend_from_slice(&self.pose_twist);
        v.extend_from_slice(self.flow_t_to_s.data());
        v.extend_from_slice(self.flow_s_to_t.data());
        v
    }

    fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

/// A scalar function of the scene state with its gradient.
pub trait Objective {
    fn value(&self, state: &SceneState) -> Result<f64>;
    fn value_and_gradient(&self, state: &SceneState) -> Result<(f64, StateGradient)>;
}

/// Gradient of `objective` at `state`; fails if the value or any partial
/// derivative is not finite.
pub fn gradient(objective: &dyn Objective, state: &SceneState) -> Result<StateGradient> {
    let (v, g) = objective.value_and_gradient(state)?;
    if !v.is_finite() {
        return Err(Error::domain(format!("objective is not finite at this state ({v})")));
    }
    if !g.is_finite() {
        return Err(Error::domain("gradient has non-finite entries"));
    }
    Ok(g)
}

/// The two frames (image pyramids), optional stereo view and intrinsics.
#[derive(Debug, Clone)]
pub struct Frames {
    pub target: ImagePyramid,
    pub source: ImagePyramid,
    pub stereo: Option<StereoPyramid>,
    pub intrinsics: CameraIntrinsics,
}

impl Frames {
    /// Builds average-pooled pyramids from full-resolution images.
    pub fn from_images(target: &Field, source: &Field, intrinsics: &CameraIntrinsics) -> Result<Self> {
        for (f, what) in [(target, "target image"), (source, "source image")] {
            f.check_channels(1, what)?;
            intrinsics.check_field(f, what)?;
        }
        Ok(Self {
            target: build_pyramid(target)?,
            source: build_pyramid(source)?,
            stereo: None,
            intrinsics: *intrinsics,
        })
    }
}

/// HMP masks of both directions, per level.
#[derive(Debug, Clone)]
pub struct StateMasks {
    pub forward: Vec<LevelMasks>,
    pub backward: Vec<LevelMasks>,
}

/// The multi-scale loss of both frame directions with masks held fixed.
pub struct LossObjective<'a> {
    frames: &'a Frames,
    weights: LossWeights,
    gauge: DepthGauge,
    masks: StateMasks,
    options: EvalOptions,
}

struct Decoded {
    raw_t: Field,
    raw_s: Field,
    scale: f64,
    depth_t: Field,
    depth_s: Field,
    pose: Pose,
    inverse: Pose,
}

impl<'a> LossObjective<'a> {
    /// Objective whose masks and sample supports are computed from `state`
    /// (with its `alpha_s`) and then held fixed.
    pub fn new(frames: &'a Frames, weights: LossWeights, gauge: DepthGauge, state: &SceneState) -> Result<Self> {
        let masks = compute_masks(frames, gauge, state)?;
        let mut out = Self::with_masks(frames, weights, gauge, masks);
        let d = out.decode(state)?;
        let (fwd, bwd) = out.pairs(state, &d)?;
        let (sf, sb) = (sample_support(&fwd, frames.stereo.as_ref()), sample_support(&bwd, None));
        for (m, s) in out.masks.forward.iter_mut().zip(sf) {
            m.support = Some(s);
        }
        for (m, s) in out.masks.backward.iter_mut().zip(sb) {
            m.support = Some(s);
        }
        Ok(out)
    }

    pub fn with_masks(frames: &'a Frames, weights: LossWeights, gauge: DepthGauge, masks: StateMasks) -> Self {
        Self {
            frames,
            weights,
            gauge,
            masks,
            options: EvalOptions::default(),
        }
    }

    pub fn with_options(mut self, options: EvalOptions) -> Self {
        self.options = options;
        self
    }

    pub fn masks(&self) -> &StateMasks {
        &self.masks
    }

    fn decode(&self, state: &SceneState) -> Result<Decoded> {
        let (raw_t, raw_s) = (raw_depth(&state.depth_t), raw_depth(&state.depth_s));
        let scale = match self.gauge {
            DepthGauge::Metric => 1.0,
            DepthGauge::MeanNormalized => 1.0 / joint_mean(&raw_t, &raw_s),
        };
        let pose = state.pose()?;
        Ok(Decoded {
            depth_t: raw_t.scale(scale),
            depth_s: raw_s.scale(scale),
            raw_t,
            raw_s,
            scale,
            inverse: pose.inverse(),
            pose,
        })
    }

    fn pairs(&self, state: &SceneState, d: &Decoded) -> Result<(PairPyramids, PairPyramids)> {
        let f = self.frames;
        let k = &f.intrinsics;
        let forward = PairPyramids::with_masks(
            &PairFrames {
                target: &f.target,
                source: &f.source,
                depth_t: &d.depth_t,
                depth_s: &d.depth_s,
                flow_t_to_s: &state.flow_t_to_s,
                flow_s_to_t: &state.flow_s_to_t,
                pose: &d.pose,
                intrinsics: k,
                alpha_s: state.alpha_s,
            },
            self.masks.forward.clone(),
        )?;
        let backward = PairPyramids::with_masks(
            &PairFrames {
                target: &f.source,
                source: &f.target,
                depth_t: &d.depth_s,
                depth_s: &d.depth_t,
                flow_t_to_s: &state.flow_s_to_t,
                flow_s_to_t: &state.flow_t_to_s,
                pose: &d.inverse,
                intrinsics: k,
                alpha_s: state.alpha_s,
            },
            self.masks.backward.clone(),
        )?;
        Ok((forward, backward))
    }

    /// Loss breakdowns of the forward and backward directions.
    pub fn breakdown(&self, state: &SceneState) -> Result<(LossBreakdown, LossBreakdown)> {
        let d = self.decode(state)?;
        let (fwd, bwd) = self.pairs(state, &d)?;
        let (a, b) = rayon::join(
            || evaluate_pair(&fwd, self.frames.stereo.as_ref(), &self.weights, self.options, None),
            || evaluate_pair(&bwd, None, &stereo_free(&self.weights), self.options, None),
        );
        Ok((a?, b?))
    }
}

fn stereo_free(w: &LossWeights) -> LossWeights {
    w.with_stereo(0.0, 0.0)
}

/// Folds per-level gradients back onto the full-resolution field through
/// the pooling pyramid; flow levels are additionally halved per level.
fn collapse_levels(levels: &[Field], flow: bool) -> Field {
    let mut g = levels[levels.len() - 1].clone();
    for l in (1..levels.len()).rev() {
        let fine = &levels[l - 1];
        let mut up = avg_pool_2x2_adjoint(&g, fine.width(), fine.height());
        if flow {
            up = up.scale(0.5);
        }
        up.add_scaled(fine, 1.0);
        g = up;
    }
    g
}

impl Objective for LossObjective<'_> {
    fn value(&self, state: &SceneState) -> Result<f64> {
        let (a, b) = self.breakdown(state)?;
        Ok(a.total + b.total)
    }

    fn value_and_gradient(&self, state: &SceneState) -> Result<(f64, StateGradient)> {
        let d = self.decode(state)?;
        let (fwd, bwd) = self.pairs(state, &d)?;
        let mut ga = PairGradient::zeros(&fwd);
        let mut gb = PairGradient::zeros(&bwd);
        let (ra, rb) = rayon::join(
            || {
                evaluate_pair(
                    &fwd,
                    self.frames.stereo.as_ref(),
                    &self.weights,
                    self.options,
                    Some(&mut ga),
                )
            },
            || evaluate_pair(&bwd, None, &stereo_free(&self.weights), self.options, Some(&mut gb)),
        );
        let value = ra?.total + rb?.total;

        // depth: pyramid adjoint, then gauge, then sigmoid parameterization
        let gd_t = collapse_levels(&ga.depth_t, false)
            .data()
            .iter()
            .zip(collapse_levels(&gb.depth_s, false).data())
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>();
        let gd_s = collapse_levels(&ga.depth_s, false)
            .data()
            .iter()
            .zip(collapse_levels(&gb.depth_t, false).data())
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>();
        let (mut graw_t, mut graw_s): (Vec<f64>, Vec<f64>) = (
            gd_t.iter().map(|g| g * d.scale).collect(),
            gd_s.iter().map(|g| g * d.scale).collect(),
        );
        if self.gauge == DepthGauge::MeanNormalized {
            // D = raw * s with s = 1 / mean(raw): dD_j/draw_i = s delta_ij - raw_j s^2 / N
            let n = (gd_t.len() + gd_s.len()) as f64;
            let dot: f64 = gd_t.iter().zip(d.raw_t.data()).map(|(g, r)| g * r).sum::<f64>()
                + gd_s.iter().zip(d.raw_s.data()).map(|(g, r)| g * r).sum::<f64>();
            let shift = dot * d.scale * d.scale / n;
            graw_t.iter_mut().for_each(|g| *g -= shift);
            graw_s.iter_mut().for_each(|g| *g -= shift);
        }
        let to_params = |graw: &[f64], params: &Field, raw: &Field| {
            Field::from_fn(params.width(), params.height(), |x, y| {
                let i = y * params.width() + x;
                let s = sigmoid(params.data()[i]);
                graw[i] * -raw.data()[i] * (1.0 - s)
            })
        };
        let depth_t = to_params(&graw_t, &state.depth_t, &d.raw_t);
        let depth_s = to_params(&graw_s, &state.depth_s, &d.raw_s);

        let jac = PoseJacobian::at(&state.pose_twist)?;
        let ja = jac.chain(&ga.rotation, &ga.translation);
        let neg: Twist = state.pose_twist.map(|x| -x);
        let jb = PoseJacobian::at(&neg)?.chain(&gb.rotation, &gb.translation);
        let mut pose_twist = [0.0; 6];
        for i in 0..6 {
            pose_twist[i] = ja[i] - jb[i];
        }

        Ok((
            value,
            StateGradient {
                depth_t,
                depth_s,
                pose_twist,
                flow_t_to_s: collapse_levels(&ga.flow, true),
                flow_s_to_t: collapse_levels(&gb.flow, true),
            },
        ))
    }
}

/// HMP masks of both directions at the state's current values.
pub fn compute_masks(frames: &Frames, gauge: DepthGauge, state: &SceneState) -> Result<StateMasks> {
    let (dt, ds) = state.depths(gauge);
    let pose = state.pose()?;
    let inv = pose.inverse();
    let k = &frames.intrinsics;
    let forward = pyramid_masks(&PairFrames {
        target: &frames.target,
        source: &frames.source,
        depth_t: &dt,
        depth_s: &ds,
        flow_t_to_s: &state.flow_t_to_s,
        flow_s_to_t: &state.flow_s_to_t,
        pose: &pose,
        intrinsics: k,
        alpha_s: state.alpha_s,
    })?;
    let backward = pyramid_masks(&PairFrames {
        target: &frames.source,
        source: &frames.target,
        depth_t: &ds,
        depth_s: &dt,
        flow_t_to_s: &state.flow_s_to_t,
        flow_s_to_t: &state.flow_t_to_s,
        pose: &inv,
        intrinsics: k,
        alpha_s: state.alpha_s,
    })?;
    Ok(StateMasks { forward, backward })
}

/// Which parameter blocks a stage may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FreeBlocks {
    pub depth: bool,
    pub pose: bool,
    pub flow: bool,
}

impl FreeBlocks {
    pub const DEPTH_POSE: Self = Self {
        depth: true,
        pose: true,
        flow: false,
    };
    pub const FLOW: Self = Self {
        depth: false,
        pose: false,
        flow: true,
    };
}

/// Base step of each block. Per-pixel blocks are additionally multiplied by
/// the pixel count, since every loss is a per-pixel mean; the pose step is
/// preconditioned by [`pose_preconditioner`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSizes {
    pub depth: f64,
    pub pose: f64,
    pub flow: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            depth: 0.01,
            pose: 1e-3,
            flow: 0.1,
        }
    }
}

impl StepSizes {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            depth: self.depth * factor,
            pose: self.pose * factor,
            flow: self.flow * factor,
        }
    }
}

/// One stage of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage {
    pub name: String,
    pub weights: LossWeights,
    pub alpha_s: f64,
    pub free: FreeBlocks,
    /// Replace both flows by the rigid flow of the current depth and pose on
    /// entry.
    pub init_flow_from_rigid: bool,
    pub steps: StepSizes,
    pub max_iters: usize,
    /// Stop when the loss changed by less than this fraction over `window`
    /// accepted steps.
    pub rel_tol: f64,
    pub window: usize,
    /// Step halvings tried before the stage is declared converged.
    pub max_halvings: usize,
    /// Smoothness relaxation of depth, relative to the mean decoded depth at
    /// stage entry (see [`EvalOptions`]).
    pub depth_relax: f64,
    /// Smoothness relaxation of flow in pixels.
    pub flow_relax: f64,
}

impl Stage {
    fn new(name: &str, weights: LossWeights, alpha_s: f64, free: FreeBlocks) -> Self {
        Self {
            name: name.to_string(),
            weights,
            alpha_s,
            free,
            init_flow_from_rigid: false,
            steps: StepSizes::default(),
            max_iters: 2000,
            rel_tol: 1e-6,
            window: 10,
            max_halvings: 5,
            depth_relax: DEFAULT_DEPTH_RELAX,
            flow_relax: DEFAULT_FLOW_RELAX,
        }
    }
}

/// Ordered stages plus the depth gauge they share.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSchedule {
    pub profile: String,
    pub gauge: DepthGauge,
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    /// Depth and pose alone, flow alone (initialized from rigid flow), then
    /// two rounds of guided depth/pose and guided flow with `alpha_s = 0.01`.
    pub fn monocular() -> Self {
        Self::build(
            "mono",
            DepthGauge::MeanNormalized,
            LossWeights::zero(),
            LossWeights::flow_refine_stage(),
        )
    }

    /// The monocular schedule with the stereo terms on every depth/pose
    /// stage, a stronger occluded-flow weight, and metric depth.
    pub fn stereo() -> Self {
        let mut flow = LossWeights::flow_refine_stage();
        flow.lambda_fc = STEREO_LAMBDA_FC;
        Self::build(
            "stereo",
            DepthGauge::Metric,
            LossWeights::zero().with_stereo(STEREO_LAMBDA_CVS, STEREO_LAMBDA_CS),
            flow,
        )
    }

    fn build(profile: &str, gauge: DepthGauge, stereo: LossWeights, flow_refine: LossWeights) -> Self {
        let add = |w: LossWeights| w.with_stereo(stereo.lambda_cvs, stereo.lambda_cs);
        let mut stages = vec![
            Stage::new(
                "depth_pose",
                add(LossWeights::depth_stage()),
                0.0,
                FreeBlocks::DEPTH_POSE,
            ),
            Stage::new("flow", LossWeights::flow_stage(), 0.0, FreeBlocks::FLOW),
        ];
        stages[1].init_flow_from_rigid = true;
        for round in 1..=2 {
            stages.push(Stage::new(
                &format!("depth_pose_guided_{round}"),
                add(LossWeights::depth_refine_stage()),
                ALPHA_S_REFINE,
                FreeBlocks::DEPTH_POSE,
            ));
            stages.push(Stage::new(
                &format!("flow_guided_{round}"),
                flow_refine,
                ALPHA_S_REFINE,
                FreeBlocks::FLOW,
            ));
        }
        Self {
            profile: profile.to_string(),
            gauge,
            stages,
        }
    }

    /// Built-in profile by name (`mono` or `stereo`).
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "mono" => Ok(Self::monocular()),
            "stereo" => Ok(Self::stereo()),
            other => Err(Error::domain(format!(
                "unknown schedule profile '{other}' (expected mono or stereo)"
            ))),
        }
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.stages.iter_mut().for_each(|s| s.max_iters = n);
        self
    }

    pub fn with_step_scale(mut self, factor: f64) -> Self {
        self.stages.iter_mut().for_each(|s| s.steps = s.steps.scaled(factor));
        self
    }
}

/// Why a stage stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The loss was already numerically zero.
    ConvergedAtEntry,
    /// Relative loss change over the window fell below the tolerance.
    RelativeChange,
    /// No halving of the step decreased the loss.
    LineSearch,
    IterationCap,
}

/// Loss history of one stage (entry value first, then every accepted step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub name: String,
    pub losses: Vec<f64>,
    pub steps: usize,
    pub stop: StopReason,
}

/// Largest multiple of the base step reached by repeated doubling after
/// immediately successful steps.
const MAX_STEP_GROWTH: f64 = 1024.0;

/// Loss below which a stage is considered converged on entry.
const ZERO_LOSS: f64 = 1e-12;

/// Inverse of the mean pixel-displacement metric `(1/N) sum J^T J` of the
/// twist, where `J` is the 2x6 Jacobian of a pixel's rigid correspondence.
/// Preconditioning the pose step with it makes one unit of step move pixels
/// by a comparable amount in every direction of the twist.
pub fn pose_preconditioner(depth_t: &Field, twist: &Twist, k: &CameraIntrinsics) -> Result<Matrix6<f64>> {
    const H: f64 = 1e-6;
    let mut columns = Vec::with_capacity(6);
    let mut valid = Mask::new(depth_t.width(), depth_t.height(), true);
    for j in 0..6 {
        let (mut plus, mut minus) = (*twist, *twist);
        plus[j] += H;
        minus[j] -= H;
        let a = rigid_flow_field(depth_t, &Pose::from_twist(&plus)?, k)?;
        let b = rigid_flow_field(depth_t, &Pose::from_twist(&minus)?, k)?;
        valid = valid.and(&a.valid).and(&b.valid);
        let mut col = a.flow;
        col.add_scaled(&b.flow, -1.0);
        columns.push(col.scale(0.5 / H));
    }
    let n = valid.count().max(1) as f64;
    let mut m = Matrix6::zeros();
    for i in 0..depth_t.pixel_count() {
        if !valid.data()[i] {
            continue;
        }
        for c in 0..2 {
            for a in 0..6 {
                for b in 0..6 {
                    m[(a, b)] += columns[a].data()[2 * i + c] * columns[b].data()[2 * i + c] / n;
                }
            }
        }
    }
    let damping = 1e-9 * m.trace() / 6.0 + 1e-12;
    m += Matrix6::identity() * damping;
    m.try_inverse()
        .ok_or_else(|| Error::domain("pose displacement metric is singular"))
}

fn step_state(
    state: &SceneState,
    g: &StateGradient,
    free: FreeBlocks,
    steps: &StepSizes,
    pose_pre: &Matrix6<f64>,
    factor: f64,
) -> SceneState {
    let mut next = state.clone();
    if free.depth {
        let s = factor * steps.depth * state.depth_t.pixel_count() as f64;
        next.depth_t.add_scaled(&g.depth_t, -s);
        next.depth_s.add_scaled(&g.depth_s, -s);
    }
    if free.pose {
        let d = pose_pre * Vector6::from_row_slice(&g.pose_twist);
        for i in 0..6 {
            next.pose_twist[i] -= factor * steps.pose * d[i];
        }
    }
    if free.flow {
        let s = factor * steps.flow * state.flow_t_to_s.pixel_count() as f64;
        next.flow_t_to_s.add_scaled(&g.flow_t_to_s, -s);
        next.flow_s_to_t.add_scaled(&g.flow_s_to_t, -s);
    }
    next
}

/// The joint step first, then each free block alone: a joint step can fail
/// at a kink of one block's terms while another block can still descend.
fn candidate_blocks(free: FreeBlocks) -> Vec<FreeBlocks> {
    let none = FreeBlocks {
        depth: false,
        pose: false,
        flow: false,
    };
    let mut out = vec![free];
    let singles = [
        (free.depth, FreeBlocks { depth: true, ..none }),
        (free.pose, FreeBlocks { pose: true, ..none }),
        (free.flow, FreeBlocks { flow: true, ..none }),
    ];
    let active: Vec<FreeBlocks> = singles.iter().filter(|(on, _)| *on).map(|(_, b)| *b).collect();
    if active.len() > 1 {
        out.extend(active);
    }
    out
}

fn divergence(stage: &str, step: usize, loss: f64) -> Error {
    Error::Divergence {
        stage: stage.to_string(),
        step,
        loss,
    }
}

/// Runs one stage in place: sets `alpha_s`, optionally re-initializes the
/// flows, freezes the masks at entry and descends on the free blocks.
pub fn run_stage(frames: &Frames, gauge: DepthGauge, stage: &Stage, state: &mut SceneState) -> Result<StageTrace> {
    state.alpha_s = stage.alpha_s;
    if stage.init_flow_from_rigid {
        let (dt, ds) = state.depths(gauge);
        let pose = state.pose()?;
        state.flow_t_to_s = rigid_flow_field(&dt, &pose, &frames.intrinsics)?.flow;
        state.flow_s_to_t = rigid_flow_field(&ds, &pose.inverse(), &frames.intrinsics)?.flow;
    }
    let (dt, ds) = state.depths(gauge);
    let options = EvalOptions {
        all_terms: false,
        depth_relax: stage.depth_relax * joint_mean(&dt, &ds),
        flow_relax: stage.flow_relax,
    };
    let objective = LossObjective::new(frames, stage.weights, gauge, state)?.with_options(options);
    let (mut loss, mut grad) = objective.value_and_gradient(state)?;
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(divergence(&stage.name, 0, loss));
    }
    let mut trace = StageTrace {
        name: stage.name.clone(),
        losses: vec![loss],
        steps: 0,
        stop: StopReason::IterationCap,
    };
    if loss < ZERO_LOSS {
        trace.stop = StopReason::ConvergedAtEntry;
        return Ok(trace);
    }
    let pose_pre = if stage.free.pose {
        pose_preconditioner(&state.depths(gauge).0, &state.pose_twist, &frames.intrinsics)?
    } else {
        Matrix6::identity()
    };
    let candidates = candidate_blocks(stage.free);
    let mut start = vec![1.0f64; candidates.len()];
    let mut last_ok = 0;
    for step in 1..=stage.max_iters {
        let mut any_finite = false;
        let mut accepted = None;
        let first = last_ok;
        let order: Vec<usize> = std::iter::once(first)
            .chain((0..candidates.len()).filter(|&c| c != first))
            .collect();
        for c in order {
            let free = candidates[c];
            let mut factor = start[c];
            for halving in 0..=stage.max_halvings {
                let trial = step_state(state, &grad, free, &stage.steps, &pose_pre, factor);
                if trial.is_finite() {
                    if let Ok(l) = objective.value(&trial) {
                        if l.is_finite() {
                            any_finite = true;
                            if l < loss {
                                start[c] = if halving == 0 {
                                    (factor * 2.0).min(MAX_STEP_GROWTH)
                                } else {
                                    factor
                                };
                                last_ok = c;
                                accepted = Some((trial, l));
                                break;
                            }
                        }
                    }
                }
                factor *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((next, l)) = accepted else {
            if !any_finite {
                return Err(divergence(&stage.name, step, f64::NAN));
            }
            trace.stop = StopReason::LineSearch;
            break;
        };
        if l > DIVERGENCE_LOSS {
            return Err(divergence(&stage.name, step, l));
        }
        *state = next;
        loss = l;
        grad = objective.value_and_gradient(state)?.1;
        trace.losses.push(loss);
        trace.steps = step;
        let n = trace.losses.len();
        if n > stage.window {
            let old = trace.losses[n - 1 - stage.window];
            if (old - loss).abs() <= stage.rel_tol * old.abs() {
                trace.stop = StopReason::RelativeChange;
                break;
            }
        }
    }
    debug!(
        "stage {}: {} steps, loss {:.6e}, {:?}",
        trace.name, trace.steps, loss, trace.stop
    );
    Ok(trace)
}

/// Runs every stage in order from `init`.
pub fn run_schedule(
    frames: &Frames,
    schedule: &StageSchedule,
    init: SceneState,
) -> Result<(SceneState, Vec<StageTrace>)> {
    let mut state = init;
    let mut traces = Vec::with_capacity(schedule.stages.len());
    for stage in &schedule.stages {
        let t = run_stage(frames, schedule.gauge, stage, &mut state)?;
        info!(
            "{}: {} -> {:.6e} after {} steps ({:?})",
            t.name,
            t.losses[0],
            t.losses.last().unwrap(),
            t.steps,
            t.stop
        );
        traces.push(t);
    }
    Ok((state, traces))
}
