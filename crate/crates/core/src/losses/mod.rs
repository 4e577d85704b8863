//! Training objectives: structural view synthesis, edge-aware smoothness,
//! rigid-region motion consistency, occluded-region flow consistency and
//! their multi-scale monocular and stereo totals.

mod kernels;

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::hmp::{self, HmpInputs};
use crate::imaging::{build_flow_pyramid, build_pyramid, BilinearTap, Field, ImagePyramid, Mask, PYRAMID_LEVELS};

use kernels::{ConsistencyGrad, ConsistencyScales, RigidGrad, RigidLevel};

/// SSIM share of the structural matching cost.
pub const BETA: f64 = 0.85;
/// Edge sensitivity of the smoothness weights.
pub const ALPHA_E: f64 = 10.0;
/// Added to every normalizer.
pub const NORMALIZATION_EPS: f64 = 1e-7;

/// Stereo view-synthesis weight of the stereo profile.
pub const STEREO_LAMBDA_CVS: f64 = 4.0;
/// Stereo smoothness weight of the stereo profile.
pub const STEREO_LAMBDA_CS: f64 = 10.0;
/// Occluded flow consistency weight used on flow stages of the stereo profile.
pub const STEREO_LAMBDA_FC: f64 = 0.02;

/// Weights of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dvs: f64,
    pub lambda_fvs: f64,
    pub lambda_ds: f64,
    pub lambda_fs: f64,
    pub lambda_dc: f64,
    pub lambda_mc: f64,
    pub lambda_fc: f64,
    #[serde(default)]
    pub lambda_cvs: f64,
    #[serde(default)]
    pub lambda_cs: f64,
}

impl LossWeights {
    /// Monocular weights in the order `[dvs, fvs, ds, fs, dc, mc, fc]`.
    pub fn from_vector(v: [f64; 7]) -> Result<Self> {
        let w = Self {
            lambda_dvs: v[0],
            lambda_fvs: v[1],
            lambda_ds: v[2],
            lambda_fs: v[3],
            lambda_dc: v[4],
            lambda_mc: v[5],
            lambda_fc: v[6],
            lambda_cvs: 0.0,
            lambda_cs: 0.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn vector(&self) -> [f64; 7] {
        [
            self.lambda_dvs,
            self.lambda_fvs,
            self.lambda_ds,
            self.lambda_fs,
            self.lambda_dc,
            self.lambda_mc,
            self.lambda_fc,
        ]
    }

    fn all(&self) -> [f64; 9] {
        let v = self.vector();
        [
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            v[6],
            self.lambda_cvs,
            self.lambda_cs,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (term, w) in Term::ALL.iter().zip(self.all()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::domain(format!(
                    "weight for {} must be finite and >= 0, got {w}",
                    term.name()
                )));
            }
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Depth and pose from view synthesis and smoothness alone.
    pub fn depth_stage() -> Self {
        Self::from_vector([1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap()
    }

    /// Flow from view synthesis and smoothness alone.
    pub fn flow_stage() -> Self {
        Self::from_vector([0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    /// Depth and pose guided by the frozen flow.
    pub fn depth_refine_stage() -> Self {
        Self::from_vector([1.0, 0.0, 1.0, 0.0, 0.05, 0.25, 0.0]).unwrap()
    }

    /// Flow guided by the frozen depth and pose.
    pub fn flow_refine_stage() -> Self {
        Self::from_vector([0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.005]).unwrap()
    }

    pub fn with_stereo(mut self, lambda_cvs: f64, lambda_cs: f64) -> Self {
        self.lambda_cvs = lambda_cvs;
        self.lambda_cs = lambda_cs;
        self
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut w = *self;
        for x in [
            &mut w.lambda_dvs,
            &mut w.lambda_fvs,
            &mut w.lambda_ds,
            &mut w.lambda_fs,
            &mut w.lambda_dc,
            &mut w.lambda_mc,
            &mut w.lambda_fc,
            &mut w.lambda_cvs,
            &mut w.lambda_cs,
        ] {
            *x *= factor;
        }
        w
    }

    /// Weight applied to `term` at pyramid level `level`.
    pub fn effective(&self, term: Term, level: usize) -> f64 {
        let base = self.all()[term as usize];
        match term {
            Term::DepthSmoothness | Term::FlowSmoothness => base * (1u64 << level) as f64,
            _ => base,
        }
    }
}

/// Loss terms in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    DepthViewSynthesis = 0,
    FlowViewSynthesis = 1,
    DepthSmoothness = 2,
    FlowSmoothness = 3,
    DepthConsistency = 4,
    RigidFlowConsistency = 5,
    OccludedFlowConsistency = 6,
    StereoViewSynthesis = 7,
    StereoSmoothness = 8,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::DepthViewSynthesis,
        Term::FlowViewSynthesis,
        Term::DepthSmoothness,
        Term::FlowSmoothness,
        Term::DepthConsistency,
        Term::RigidFlowConsistency,
        Term::OccludedFlowConsistency,
        Term::StereoViewSynthesis,
        Term::StereoSmoothness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::DepthViewSynthesis => "depth_view_synthesis",
            Term::FlowViewSynthesis => "flow_view_synthesis",
            Term::DepthSmoothness => "depth_smoothness",
            Term::FlowSmoothness => "flow_smoothness",
            Term::DepthConsistency => "depth_consistency",
            Term::RigidFlowConsistency => "rigid_flow_consistency",
            Term::OccludedFlowConsistency => "occluded_flow_consistency",
            Term::StereoViewSynthesis => "stereo_view_synthesis",
            Term::StereoSmoothness => "stereo_smoothness",
        }
    }
}

/// A normalized term value with the weight mass it was normalized by.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermValue {
    pub value: f64,
    /// Normalizer without the epsilon: mask mass or pixel count.
    pub count: f64,
    /// Set when the mask was empty and the value defaulted to 0.
    pub empty: bool,
}

impl TermValue {
    fn empty() -> Self {
        Self {
            value: 0.0,
            count: 0.0,
            empty: true,
        }
    }
}

/// One (term, level) contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermEntry {
    pub term: Term,
    pub level: usize,
    pub value: TermValue,
    /// Weight multiplying `value` in the total.
    pub weight: f64,
}

/// Per-term, per-level values and their weighted total.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub entries: Vec<TermEntry>,
    pub total: f64,
}

impl LossBreakdown {
    fn push(&mut self, term: Term, level: usize, value: TermValue, weight: f64) {
        if value.empty && weight > 0.0 {
            warn!("{} at level {level}: empty mask, term set to 0", term.name());
        }
        self.entries.push(TermEntry {
            term,
            level,
            value,
            weight,
        });
    }

    fn finish(mut self) -> Self {
        self.entries.sort_by_key(|e| (e.term, e.level));
        self.total = self.recompute_total();
        self
    }

    /// `sum weight * value` in a fixed order.
    pub fn recompute_total(&self) -> f64 {
        self.entries.iter().map(|e| e.weight * e.value.value).sum()
    }

    pub fn value(&self, term: Term, level: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.term == term && e.level == level)
            .map(|e| e.value.value)
            .sum()
    }

    /// Weighted contribution of one term over all levels.
    pub fn weighted_term(&self, term: Term) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.term == term)
            .map(|e| e.weight * e.value.value)
            .sum()
    }

    /// Terms whose weighted contribution is non-zero.
    pub fn nonzero_terms(&self) -> Vec<Term> {
        let mut out: Vec<Term> = Term::ALL
            .into_iter()
            .filter(|t| self.weighted_term(*t) != 0.0)
            .collect();
        out.dedup();
        out
    }

    /// Sums two breakdowns entry by entry (used for the two frame directions).
    pub fn merge(mut self, other: LossBreakdown) -> Self {
        for e in other.entries {
            if let Some(mine) = self.entries.iter_mut().find(|m| m.term == e.term && m.level == e.level) {
                mine.value.value += e.value.value;
                mine.value.count += e.value.count;
                mine.value.empty &= e.value.empty;
            } else {
                self.entries.push(e);
            }
        }
        self.finish()
    }

    /// `{term: {level: value}, "counts": {term: {level: count}}, "total": t}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut values: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
        let mut counts: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
        for e in &self.entries {
            values
                .entry(e.term.name())
                .or_default()
                .insert(e.level.to_string(), e.value.value);
            counts
                .entry(e.term.name())
                .or_default()
                .insert(e.level.to_string(), e.value.count);
        }
        let mut obj = serde_json::Map::new();
        for (k, v) in values {
            obj.insert(k.to_string(), serde_json::json!(v));
        }
        obj.insert("counts".into(), serde_json::json!(counts));
        obj.insert("total".into(), serde_json::json!(self.total));
        serde_json::Value::Object(obj)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Masked structural matching cost between a target and a synthesized
/// image, normalized by the mask mass.
///
/// Only pixels whose whole 3x3 SSIM window lies inside the mask's support
/// contribute, so image content under zero mask never affects the result.
pub fn structural_matching_loss(target: &Field, synthesized: &Field, mask: &Field, beta: f64) -> Result<TermValue> {
    target.check_channels(1, "target image")?;
    target.check_grid(synthesized, "synthesized image")?;
    synthesized.check_channels(1, "synthesized image")?;
    target.check_grid(mask, "mask")?;
    check_beta(beta)?;
    let all = Mask::new(target.width(), target.height(), true);
    let eff = kernels::effective_mask(mask, &all);
    let (v, _) = kernels::structural_core(target, synthesized, &eff, beta, 0.0, false);
    if v.empty {
        warn!("structural matching loss: empty mask");
    }
    Ok(v)
}

/// Edge-aware second-order smoothness of `o` (any channel count) under the
/// edges of a single-channel `image`, normalized by the pixel count.
pub fn smoothness_loss(o: &Field, image: &Field, alpha_e: f64) -> Result<f64> {
    o.check_grid(image, "edge image")?;
    image.check_channels(1, "edge image")?;
    Ok(kernels::smoothness(o, image, alpha_e, 0.0, 0.0, None).value)
}

fn check_pair(
    depth_t: &Field,
    depth_s: Option<&Field>,
    flow: &Field,
    k: &CameraIntrinsics,
    masks: &[&Field],
) -> Result<()> {
    depth_t.check_channels(1, "target depth")?;
    k.check_field(depth_t, "target depth")?;
    if let Some(d) = depth_s {
        d.check_channels(1, "source depth")?;
        k.check_field(d, "source depth")?;
    }
    flow.check_channels(2, "flow")?;
    k.check_field(flow, "flow")?;
    for m in masks {
        k.check_field(m, "mask")?;
    }
    Ok(())
}

/// Depth and flow consistency on rigid visible pixels, `(L_dc, L_mc)`.
pub fn motion_consistency_losses(
    depth_t: &Field,
    depth_s: &Field,
    flow_t_to_s: &Field,
    pose: &Pose,
    k: &CameraIntrinsics,
    v: &Field,
    s: &Field,
) -> Result<(TermValue, TermValue)> {
    check_pair(depth_t, Some(depth_s), flow_t_to_s, k, &[v, s])?;
    let rigid = RigidLevel::new(depth_t, pose, k);
    let on = ConsistencyScales {
        depth: 1.0,
        flow_rigid: 1.0,
        flow_occluded: 0.0,
    };
    let out = kernels::consistency(&rigid, flow_t_to_s, depth_s, v, s, on, on, None);
    Ok((out.depth, out.flow_rigid))
}

/// Flow consistency with the rigid flow on non-visible pixels.
pub fn occluded_flow_consistency(
    flow_t_to_s: &Field,
    depth_t: &Field,
    pose: &Pose,
    k: &CameraIntrinsics,
    v: &Field,
) -> Result<TermValue> {
    check_pair(depth_t, None, flow_t_to_s, k, &[v])?;
    let rigid = RigidLevel::new(depth_t, pose, k);
    let zeros = Field::new(v.width(), v.height(), 1);
    let on = ConsistencyScales {
        depth: 0.0,
        flow_rigid: 0.0,
        flow_occluded: 1.0,
    };
    let out = kernels::consistency(&rigid, flow_t_to_s, depth_t, v, &zeros, on, on, None);
    Ok(out.flow_occluded)
}

/// Everything one pyramid level of a directed frame pair needs.
#[derive(Debug, Clone)]
pub struct PairLevel {
    pub target: Field,
    pub source: Field,
    pub depth_t: Field,
    pub depth_s: Field,
    /// Target-to-source flow.
    pub flow: Field,
    /// Visibility (constant during evaluation).
    pub v: Field,
    /// Soft moving mask (constant during evaluation).
    pub s: Field,
    pub support: Option<SampleSupport>,
    pub intrinsics: CameraIntrinsics,
}

/// Multi-scale inputs for one directed pair (target to source).
#[derive(Debug, Clone)]
pub struct PairPyramids {
    pub levels: Vec<PairLevel>,
    pub pose: Pose,
}

/// Full-resolution inputs for [`PairPyramids::build`].
#[derive(Debug, Clone, Copy)]
pub struct PairFrames<'a> {
    pub target: &'a ImagePyramid,
    pub source: &'a ImagePyramid,
    pub depth_t: &'a Field,
    pub depth_s: &'a Field,
    pub flow_t_to_s: &'a Field,
    pub flow_s_to_t: &'a Field,
    pub pose: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
    pub alpha_s: f64,
}

/// Visibility and soft moving mask of one level, plus optionally frozen
/// sample supports.
#[derive(Debug, Clone)]
pub struct LevelMasks {
    pub v: Field,
    pub s: Field,
    pub support: Option<SampleSupport>,
}

/// Pixels whose view-synthesis samples count as inside the source image.
/// When present on a level they replace the in-bounds test of the current
/// coordinates, so the loss stays continuous while parameters move.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSupport {
    pub rigid: Mask,
    pub flow: Mask,
    pub stereo: Option<Mask>,
}

fn in_bounds_mask(coords: &[(f64, f64)], ok: &[bool], w: usize, h: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        let i = y * w + x;
        ok[i] && BilinearTap::new(coords[i].0, coords[i].1, w, h).in_bounds
    })
}

fn flow_coords(flow: &Field) -> Vec<(f64, f64)> {
    let w = flow.width();
    (0..flow.pixel_count())
        .map(|i| {
            (
                (i % w) as f64 + flow.data()[2 * i],
                (i / w) as f64 + flow.data()[2 * i + 1],
            )
        })
        .collect()
}

/// Current sample supports of every level.
pub fn sample_support(pair: &PairPyramids, stereo: Option<&StereoPyramid>) -> Vec<SampleSupport> {
    pair.levels
        .iter()
        .map(|lv| {
            let k = &lv.intrinsics;
            let rigid = RigidLevel::new(&lv.depth_t, &pair.pose, k);
            let all = vec![true; k.width * k.height];
            SampleSupport {
                rigid: in_bounds_mask(&rigid.coords, &rigid.ok, k.width, k.height),
                flow: in_bounds_mask(&flow_coords(&lv.flow), &all, k.width, k.height),
                stereo: stereo.map(|st| {
                    let r = RigidLevel::new(&lv.depth_t, &st.pose, k);
                    in_bounds_mask(&r.coords, &r.ok, k.width, k.height)
                }),
            }
        })
        .collect()
}

/// Per-level HMP masks for a frame pair.
pub fn pyramid_masks(frames: &PairFrames<'_>) -> Result<Vec<LevelMasks>> {
    let dt = build_pyramid(frames.depth_t)?;
    let ds = build_pyramid(frames.depth_s)?;
    let ft = build_flow_pyramid(frames.flow_t_to_s)?;
    let fs = build_flow_pyramid(frames.flow_s_to_t)?;
    (0..PYRAMID_LEVELS)
        .map(|l| {
            let k = frames.intrinsics.level(l);
            let out = hmp::parse(&HmpInputs {
                depth_t: dt.level(l),
                depth_s: ds.level(l),
                flow_t_to_s: ft.level(l),
                flow_s_to_t: fs.level(l),
                pose: frames.pose,
                intrinsics: &k,
                alpha_s: frames.alpha_s,
            })?;
            Ok(LevelMasks {
                v: out.v,
                s: out.s,
                support: None,
            })
        })
        .collect()
}

impl PairPyramids {
    /// Builds all pyramids and computes the HMP masks at every level.
    pub fn build(frames: &PairFrames<'_>) -> Result<Self> {
        let masks = pyramid_masks(frames)?;
        Self::with_masks(frames, masks)
    }

    /// Builds all pyramids with externally supplied masks.
    pub fn with_masks(frames: &PairFrames<'_>, masks: Vec<LevelMasks>) -> Result<Self> {
        let k = frames.intrinsics;
        for (p, what) in [(frames.target, "target image"), (frames.source, "source image")] {
            if p.len() != PYRAMID_LEVELS {
                return Err(Error::domain(format!(
                    "{what}: expected {PYRAMID_LEVELS} pyramid levels, got {}",
                    p.len()
                )));
            }
            p.levels[0].check_channels(1, what)?;
            k.check_field(&p.levels[0], what)?;
        }
        check_pair(frames.depth_t, Some(frames.depth_s), frames.flow_t_to_s, k, &[])?;
        if masks.len() != PYRAMID_LEVELS {
            return Err(Error::domain(format!(
                "expected {PYRAMID_LEVELS} mask levels, got {}",
                masks.len()
            )));
        }
        let (it, is) = (frames.target, frames.source);
        let dt = build_pyramid(frames.depth_t)?;
        let ds = build_pyramid(frames.depth_s)?;
        let ft = build_flow_pyramid(frames.flow_t_to_s)?;
        let levels = masks
            .into_iter()
            .enumerate()
            .map(|(l, m)| PairLevel {
                target: it.levels[l].clone(),
                source: is.levels[l].clone(),
                depth_t: dt.levels[l].clone(),
                depth_s: ds.levels[l].clone(),
                flow: ft.levels[l].clone(),
                v: m.v,
                s: m.s,
                support: m.support,
                intrinsics: k.level(l),
            })
            .collect();
        let out = Self {
            levels,
            pose: *frames.pose,
        };
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        if self.levels.len() != PYRAMID_LEVELS {
            return Err(Error::domain(format!(
                "expected {PYRAMID_LEVELS} pyramid levels, got {}",
                self.levels.len()
            )));
        }
        for (l, lv) in self.levels.iter().enumerate() {
            let k = &lv.intrinsics;
            for (f, what) in [
                (&lv.target, "target image"),
                (&lv.source, "source image"),
                (&lv.depth_t, "target depth"),
                (&lv.depth_s, "source depth"),
                (&lv.flow, "flow"),
                (&lv.v, "visibility"),
                (&lv.s, "moving mask"),
            ] {
                k.check_field(f, what)
                    .map_err(|e| Error::domain(format!("pyramid level {l}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Stereo image pyramid with its fixed target-to-stereo pose.
#[derive(Debug, Clone)]
pub struct StereoPyramid {
    pub images: Vec<Field>,
    pub pose: Pose,
}

impl StereoPyramid {
    /// Average-pooled pyramid of a stereo image.
    pub fn build(image: &Field, pose: &Pose) -> Result<Self> {
        image.check_channels(1, "stereo image")?;
        Ok(Self {
            images: build_pyramid(image)?.levels,
            pose: *pose,
        })
    }
}

/// Evaluation switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Evaluate and report zero-weight terms as well.
    pub all_terms: bool,
    /// When positive, the depth smoothness terms use
    /// `sqrt(x^2 + r^2) - r` in place of `|x|` (depth units).
    pub depth_relax: f64,
    /// Same for the flow smoothness term (pixels).
    pub flow_relax: f64,
}

/// Gradient of a pair objective with respect to every level input.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub depth_t: Vec<Field>,
    pub depth_s: Vec<Field>,
    pub flow: Vec<Field>,
    /// dL/dR summed over levels.
    pub rotation: Matrix3<f64>,
    /// dL/dt summed over levels.
    pub translation: Vector3<f64>,
}

impl PairGradient {
    pub fn zeros(pair: &PairPyramids) -> Self {
        let z = |f: &Field| Field::new(f.width(), f.height(), f.channels());
        Self {
            depth_t: pair.levels.iter().map(|l| z(&l.depth_t)).collect(),
            depth_s: pair.levels.iter().map(|l| z(&l.depth_s)).collect(),
            flow: pair.levels.iter().map(|l| z(&l.flow)).collect(),
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }
}

/// Monocular (and optionally stereo) total for one directed pair, with
/// optional gradient accumulation.
pub fn evaluate_pair(
    pair: &PairPyramids,
    stereo: Option<&StereoPyramid>,
    weights: &LossWeights,
    options: EvalOptions,
    mut grad: Option<&mut PairGradient>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    pair.check()?;
    if let Some(st) = stereo {
        if st.images.len() != PYRAMID_LEVELS {
            return Err(Error::domain(format!(
                "expected {PYRAMID_LEVELS} stereo levels, got {}",
                st.images.len()
            )));
        }
        for (l, img) in st.images.iter().enumerate() {
            pair.levels[l].intrinsics.check_field(img, "stereo image")?;
        }
    }
    let mut out = LossBreakdown::default();
    let on = |w: f64| options.all_terms || w > 0.0;
    for (l, lv) in pair.levels.iter().enumerate() {
        let k = &lv.intrinsics;
        let n = lv.target.pixel_count();
        let eff = |t: Term| weights.effective(t, l);
        let need_rigid = on(eff(Term::DepthViewSynthesis))
            || on(eff(Term::DepthConsistency))
            || on(eff(Term::RigidFlowConsistency))
            || on(eff(Term::OccludedFlowConsistency));
        let rigid = need_rigid.then(|| RigidLevel::new(&lv.depth_t, &pair.pose, k));
        let mut rgrad = grad.as_ref().map(|_| RigidGrad::new(n));

        if on(eff(Term::DepthViewSynthesis)) {
            let rigid = rigid.as_ref().unwrap();
            let base = Field::from_fn(lv.v.width(), lv.v.height(), |x, y| {
                lv.v.at(x, y) * (1.0 - lv.s.at(x, y))
            });
            let w = eff(Term::DepthViewSynthesis);
            let cg = rgrad.as_mut().map(|g| g.coords.as_mut_slice());
            let v = kernels::view_synthesis(
                &lv.target,
                &lv.source,
                &rigid.coords,
                &rigid.ok,
                lv.support.as_ref().map(|s| &s.rigid),
                &base,
                BETA,
                w,
                cg,
            );
            out.push(Term::DepthViewSynthesis, l, v, w);
        }

        if on(eff(Term::FlowViewSynthesis)) {
            let coords = flow_coords(&lv.flow);
            let usable = vec![true; n];
            let w = eff(Term::FlowViewSynthesis);
            let mut cg = grad.as_ref().map(|_| vec![[0.0; 2]; n]);
            let v = kernels::view_synthesis(
                &lv.target,
                &lv.source,
                &coords,
                &usable,
                lv.support.as_ref().map(|s| &s.flow),
                &lv.v,
                BETA,
                w,
                cg.as_deref_mut(),
            );
            if let (Some(g), Some(cg)) = (grad.as_mut(), cg) {
                for (dst, src) in g.flow[l].data_mut().chunks_mut(2).zip(cg) {
                    dst[0] += src[0];
                    dst[1] += src[1];
                }
            }
            out.push(Term::FlowViewSynthesis, l, v, w);
        }

        for (term, field) in [(Term::DepthSmoothness, &lv.depth_t), (Term::FlowSmoothness, &lv.flow)] {
            let w = eff(term);
            if !on(w) {
                continue;
            }
            let sink = grad.as_mut().map(|g| match term {
                Term::DepthSmoothness => &mut g.depth_t[l],
                _ => &mut g.flow[l],
            });
            let relax = match term {
                Term::DepthSmoothness => options.depth_relax,
                _ => options.flow_relax / (1u32 << l) as f64,
            };
            let v = kernels::smoothness(field, &lv.target, ALPHA_E, relax, w, sink);
            out.push(term, l, v, w);
        }

        let cs = ConsistencyScales {
            depth: eff(Term::DepthConsistency),
            flow_rigid: eff(Term::RigidFlowConsistency),
            flow_occluded: eff(Term::OccludedFlowConsistency),
        };
        let ce = ConsistencyScales {
            depth: on(cs.depth) as u8 as f64,
            flow_rigid: on(cs.flow_rigid) as u8 as f64,
            flow_occluded: on(cs.flow_occluded) as u8 as f64,
        };
        if ce.depth + ce.flow_rigid + ce.flow_occluded > 0.0 {
            let rigid = rigid.as_ref().unwrap();
            let cgrad = match (grad.as_mut(), rgrad.as_mut()) {
                (Some(g), Some(rg)) => {
                    let (flow, depth_s) = (&mut g.flow[l], &mut g.depth_s[l]);
                    Some(ConsistencyGrad {
                        rigid: rg,
                        flow,
                        depth_s,
                    })
                }
                _ => None,
            };
            let vals = kernels::consistency(rigid, &lv.flow, &lv.depth_s, &lv.v, &lv.s, cs, ce, cgrad);
            for (term, v, w) in [
                (Term::DepthConsistency, vals.depth, cs.depth),
                (Term::RigidFlowConsistency, vals.flow_rigid, cs.flow_rigid),
                (Term::OccludedFlowConsistency, vals.flow_occluded, cs.flow_occluded),
            ] {
                if on(w) {
                    out.push(term, l, v, w);
                }
            }
        }

        if let (Some(g), Some(rg), Some(rigid)) = (grad.as_mut(), rgrad.as_ref(), rigid.as_ref()) {
            rg.backprop(
                rigid,
                &pair.pose,
                k,
                &mut g.depth_t[l],
                Some((&mut g.rotation, &mut g.translation)),
            );
        }

        if let Some(st) = stereo {
            let w = weights.lambda_cvs;
            if on(w) {
                let srig = RigidLevel::new(&lv.depth_t, &st.pose, k);
                let mut sg = grad.as_ref().map(|_| RigidGrad::new(n));
                let ones = Field::filled(k.width, k.height, 1, 1.0);
                let cg = sg.as_mut().map(|g| g.coords.as_mut_slice());
                let v = kernels::view_synthesis(
                    &lv.target,
                    &st.images[l],
                    &srig.coords,
                    &srig.ok,
                    lv.support.as_ref().and_then(|s| s.stereo.as_ref()),
                    &ones,
                    BETA,
                    w,
                    cg,
                );
                if let (Some(g), Some(sg)) = (grad.as_mut(), sg) {
                    sg.backprop(&srig, &st.pose, k, &mut g.depth_t[l], None);
                }
                out.push(Term::StereoViewSynthesis, l, v, w);
            }
            let w = weights.lambda_cs;
            if on(w) {
                let sink = grad.as_mut().map(|g| &mut g.depth_t[l]);
                let v = kernels::smoothness(&lv.depth_t, &lv.target, ALPHA_E, options.depth_relax, w, sink);
                out.push(Term::StereoSmoothness, l, v, w);
            }
        }
    }
    Ok(out.finish())
}

/// Multi-scale monocular objective of one directed pair.
pub fn total_monocular_loss(pair: &PairPyramids, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut w = *weights;
    w.lambda_cvs = 0.0;
    w.lambda_cs = 0.0;
    evaluate_pair(pair, None, &w, EvalOptions::default(), None)
}

/// Monocular objective plus stereo view synthesis and smoothness from the
/// target depth with the fixed target-to-stereo pose.
pub fn total_stereo_loss(pair: &PairPyramids, stereo: &StereoPyramid, weights: &LossWeights) -> Result<LossBreakdown> {
    evaluate_pair(pair, Some(stereo), weights, EvalOptions::default(), None)
}
