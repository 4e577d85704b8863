//! Per-level loss kernels with optional reverse-mode accumulation.
//!
//! Every kernel returns the normalized term value and, when handed a
//! gradient sink, adds `scale * d(term)/d(input)` into it. Masks (`V`, `S`)
//! are constants here.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{CameraIntrinsics, Pose, MIN_DEPTH};
use crate::imaging::{laplacian, laplacian_adjoint, ssim_map, ssim_map_masked_backward, BilinearTap, Field, Mask};

use super::{TermValue, NORMALIZATION_EPS};

/// Rigid reprojection of every pixel of a depth map.
pub(crate) struct RigidLevel {
    /// Back-projected points `d * K^-1 h(p)` in the first camera.
    pub points: Vec<Vector3<f64>>,
    /// Transformed points in the second camera.
    pub moved: Vec<Vector3<f64>>,
    /// Reprojected coordinates `p_st`.
    pub coords: Vec<(f64, f64)>,
    /// False where the moved point is behind the camera.
    pub ok: Vec<bool>,
}

impl RigidLevel {
    pub fn new(depth: &Field, pose: &Pose, k: &CameraIntrinsics) -> Self {
        let (w, h) = (depth.width(), depth.height());
        let n = w * h;
        let mut points = Vec::with_capacity(n);
        let mut moved = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        let mut ok = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let p = k.ray(x as f64, y as f64) * depth.at(x, y);
                let q = pose.transform(&p);
                let good = q.z > MIN_DEPTH;
                let c = if good {
                    (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
                } else {
                    (f64::NAN, f64::NAN)
                };
                points.push(p);
                moved.push(q);
                coords.push(c);
                ok.push(good);
            }
        }
        Self {
            points,
            moved,
            coords,
            ok,
        }
    }
}

/// Gradient accumulator for everything a rigid reprojection depends on.
pub(crate) struct RigidGrad {
    /// dL / d(u_st, v_st)
    pub coords: Vec<[f64; 2]>,
    /// dL / d(projected depth)
    pub depth_hat: Vec<f64>,
}

impl RigidGrad {
    pub fn new(n: usize) -> Self {
        Self {
            coords: vec![[0.0; 2]; n],
            depth_hat: vec![0.0; n],
        }
    }

    /// Pushes the accumulated coordinate and projected-depth gradients back
    /// onto the depth map and, optionally, onto `R` and `t`.
    pub fn backprop(
        &self,
        rigid: &RigidLevel,
        pose: &Pose,
        k: &CameraIntrinsics,
        depth_grad: &mut Field,
        pose_grad: Option<(&mut Matrix3<f64>, &mut Vector3<f64>)>,
    ) {
        let w = depth_grad.width();
        let mut g_rot = Matrix3::zeros();
        let mut g_trans = Vector3::zeros();
        let dg = depth_grad.data_mut();
        for i in 0..rigid.ok.len() {
            if !rigid.ok[i] {
                continue;
            }
            let [gu, gv] = self.coords[i];
            let gz = self.depth_hat[i];
            if gu == 0.0 && gv == 0.0 && gz == 0.0 {
                continue;
            }
            let q = rigid.moved[i];
            let iz = 1.0 / q.z;
            let g = Vector3::new(
                gu * k.fx * iz,
                gv * k.fy * iz,
                gz - (gu * k.fx * q.x + gv * k.fy * q.y) * iz * iz,
            );
            let ray = k.ray((i % w) as f64, (i / w) as f64);
            dg[i] += g.dot(&(pose.rotation * ray));
            g_rot += g * rigid.points[i].transpose();
            g_trans += g;
        }
        if let Some((gr, gt)) = pose_grad {
            *gr += g_rot;
            *gt += g_trans;
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Effective structural-matching mask: the base mask where every pixel of
/// the 3x3 SSIM window has a usable sample and non-zero base weight.
pub(crate) fn effective_mask(base: &Field, usable: &Mask) -> Field {
    let support = Mask::from_fn(base.width(), base.height(), |x, y| {
        usable.get(x, y) && base.at(x, y) > 0.0
    });
    let eroded = support.erode3();
    Field::from_fn(base.width(), base.height(), |x, y| {
        if eroded.get(x, y) {
            base.at(x, y)
        } else {
            0.0
        }
    })
}

/// `sum m [(1-beta)|I - Î| + beta (1 - SSIM)/2] / (sum m + eps)` with an
/// already-effective mask `m`. Returns the term and, if requested, the
/// gradient with respect to `Î` scaled by `scale`.
pub(crate) fn structural_core(
    target: &Field,
    synth: &Field,
    mask: &Field,
    beta: f64,
    scale: f64,
    want_grad: bool,
) -> (TermValue, Option<Field>) {
    let weight: f64 = mask.data().iter().sum();
    if weight < NORMALIZATION_EPS {
        return (
            TermValue::empty(),
            want_grad.then(|| Field::new(target.width(), target.height(), 1)),
        );
    }
    let ssim = ssim_map(target, synth).expect("grids checked by caller");
    let norm = 1.0 / (weight + NORMALIZATION_EPS);
    let mut sum = 0.0;
    for i in 0..mask.data().len() {
        let m = mask.data()[i];
        if m == 0.0 {
            continue;
        }
        let diff = synth.data()[i] - target.data()[i];
        sum += m * ((1.0 - beta) * diff.abs() + beta * ((1.0 - ssim.data()[i]) / 2.0).max(0.0));
    }
    let value = TermValue {
        value: sum * norm,
        count: weight,
        empty: false,
    };
    if !want_grad {
        return (value, None);
    }
    let g = scale * norm;
    let upstream = Field::from_fn(mask.width(), mask.height(), |x, y| {
        let i = y * mask.width() + x;
        if ssim.data()[i] < 1.0 {
            -g * mask.data()[i] * beta / 2.0
        } else {
            0.0
        }
    });
    let mut grad = ssim_map_masked_backward(target, synth, &upstream);
    for (i, gi) in grad.data_mut().iter_mut().enumerate() {
        let m = mask.data()[i];
        if m != 0.0 {
            *gi += g * m * (1.0 - beta) * sign(synth.data()[i] - target.data()[i]);
        }
    }
    (value, Some(grad))
}

/// View synthesis loss of `target` from `source` sampled at `coords`.
///
/// `frozen` replaces the in-bounds test of the samples, keeping the mask
/// fixed while the coordinates move. `coord_grad`, when given, receives
/// `scale * dL/d(u, v)` per pixel.
pub(crate) fn view_synthesis(
    target: &Field,
    source: &Field,
    coords: &[(f64, f64)],
    usable: &[bool],
    frozen: Option<&Mask>,
    base_mask: &Field,
    beta: f64,
    scale: f64,
    coord_grad: Option<&mut [[f64; 2]]>,
) -> TermValue {
    let (w, h) = (target.width(), target.height());
    let mut synth = Field::new(w, h, 1);
    let mut d_synth = vec![(0.0, 0.0); w * h];
    let mut ok = Mask::new(w, h, false);
    {
        let sd = synth.data_mut();
        for i in 0..w * h {
            if !usable[i] {
                continue;
            }
            let (u, v) = coords[i];
            let tap = BilinearTap::new(u, v, source.width(), source.height());
            let (val, du, dv) = tap.value_grad(source, 0);
            sd[i] = val;
            d_synth[i] = (du, dv);
            if tap.in_bounds {
                ok.set(i % w, i / w, true);
            }
        }
    }
    if let Some(f) = frozen {
        ok = Mask::from_fn(w, h, |x, y| f.get(x, y) && usable[y * w + x]);
    }
    let mask = effective_mask(base_mask, &ok);
    let want = coord_grad.is_some();
    let (value, grad) = structural_core(target, &synth, &mask, beta, scale, want);
    if let (Some(out), Some(g)) = (coord_grad, grad) {
        for (i, gi) in g.data().iter().enumerate() {
            if *gi != 0.0 {
                let (du, dv) = d_synth[i];
                out[i][0] += gi * du;
                out[i][1] += gi * dv;
            }
        }
    }
    value
}

/// Edge-aware second-order smoothness,
/// `sum_p sum_c |lap O_c(p)| exp(-alpha_e |lap I(p)|) / N`.
///
/// `relax > 0` replaces `|x|` by `sqrt(x^2 + relax^2) - relax`.
pub(crate) fn smoothness(
    o: &Field,
    image: &Field,
    alpha_e: f64,
    relax: f64,
    scale: f64,
    grad: Option<&mut Field>,
) -> TermValue {
    let lap_o = laplacian(o);
    let lap_i = laplacian(image);
    let n = o.pixel_count() as f64;
    let ch = o.channels();
    let mut sum = 0.0;
    let weights: Vec<f64> = lap_i.data().iter().map(|l| (-alpha_e * l.abs()).exp()).collect();
    let rho = |v: f64| {
        if relax > 0.0 {
            (v * v + relax * relax).sqrt() - relax
        } else {
            v.abs()
        }
    };
    let d_rho = |v: f64| {
        if relax > 0.0 {
            v / (v * v + relax * relax).sqrt()
        } else {
            sign(v)
        }
    };
    for (i, px) in lap_o.data().chunks(ch).enumerate() {
        sum += weights[i] * px.iter().map(|v| rho(*v)).sum::<f64>();
    }
    if let Some(g) = grad {
        let mut up = Field::new(o.width(), o.height(), ch);
        for (i, (u, l)) in up.data_mut().iter_mut().zip(lap_o.data()).enumerate() {
            *u = scale * weights[i / ch] * d_rho(*l) / n;
        }
        g.add_scaled(&laplacian_adjoint(&up), 1.0);
    }
    TermValue {
        value: sum / n,
        count: n,
        empty: false,
    }
}

/// Scales for the three consistency terms; zero skips the term.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ConsistencyScales {
    pub depth: f64,
    pub flow_rigid: f64,
    pub flow_occluded: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ConsistencyValues {
    pub depth: TermValue,
    pub flow_rigid: TermValue,
    pub flow_occluded: TermValue,
}

pub(crate) struct ConsistencyGrad<'a> {
    pub rigid: &'a mut RigidGrad,
    pub flow: &'a mut Field,
    pub depth_s: &'a mut Field,
}

/// Depth and flow consistency on rigid visible pixels and flow consistency
/// on non-visible pixels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn consistency(
    rigid: &RigidLevel,
    flow: &Field,
    depth_s: &Field,
    v: &Field,
    s: &Field,
    scales: ConsistencyScales,
    evaluate: ConsistencyScales,
    grad: Option<ConsistencyGrad<'_>>,
) -> ConsistencyValues {
    let (w, h) = (flow.width(), flow.height());
    let n = w * h;
    let want_dc = evaluate.depth != 0.0;
    let want_mc = evaluate.flow_rigid != 0.0;
    let want_fc = evaluate.flow_occluded != 0.0;

    let mut taps: Vec<Option<BilinearTap>> = vec![None; n];
    let (mut w_dc, mut w_mc, mut w_fc) = (0.0, 0.0, 0.0);
    for i in 0..n {
        if !rigid.ok[i] {
            continue;
        }
        let vis = v.data()[i];
        let rigid_w = vis * (1.0 - s.data()[i]);
        w_mc += rigid_w;
        w_fc += 1.0 - vis;
        if want_dc {
            let (us, vs) = (
                (i % w) as f64 + flow.data()[2 * i],
                (i / w) as f64 + flow.data()[2 * i + 1],
            );
            let tap = BilinearTap::new(us, vs, w, h);
            if tap.in_bounds {
                w_dc += rigid_w;
                taps[i] = Some(tap);
            }
        }
    }
    let (n_dc, n_mc, n_fc) = (
        1.0 / (w_dc + NORMALIZATION_EPS),
        1.0 / (w_mc + NORMALIZATION_EPS),
        1.0 / (w_fc + NORMALIZATION_EPS),
    );
    let (mut s_dc, mut s_mc, mut s_fc) = (0.0, 0.0, 0.0);
    let mut grad = grad;
    for i in 0..n {
        if !rigid.ok[i] {
            continue;
        }
        let vis = v.data()[i];
        let rigid_w = vis * (1.0 - s.data()[i]);
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let (us, vs) = (x + flow.data()[2 * i], y + flow.data()[2 * i + 1]);
        let (ut, vt) = rigid.coords[i];
        let (du, dv) = (us - ut, vs - vt);
        let l1 = du.abs() + dv.abs();
        if want_mc && rigid_w != 0.0 {
            s_mc += rigid_w * l1;
        }
        if want_fc && vis != 1.0 {
            s_fc += (1.0 - vis) * l1;
        }
        let mut dc_parts = None;
        if let Some(tap) = taps[i] {
            let (ds, dds_du, dds_dv) = tap.value_grad(depth_s, 0);
            let diff = ds - rigid.moved[i].z;
            s_dc += rigid_w * diff.abs();
            dc_parts = Some((tap, diff, dds_du, dds_dv));
        }
        if let Some(g) = grad.as_mut() {
            let coeff_l1 = scales.flow_rigid * rigid_w * n_mc + scales.flow_occluded * (1.0 - vis) * n_fc;
            if coeff_l1 != 0.0 {
                let (gu, gv) = (coeff_l1 * sign(du), coeff_l1 * sign(dv));
                g.flow.data_mut()[2 * i] += gu;
                g.flow.data_mut()[2 * i + 1] += gv;
                g.rigid.coords[i][0] -= gu;
                g.rigid.coords[i][1] -= gv;
            }
            if let Some((tap, diff, dds_du, dds_dv)) = dc_parts {
                let gd = scales.depth * rigid_w * n_dc * sign(diff);
                if gd != 0.0 {
                    g.flow.data_mut()[2 * i] += gd * dds_du;
                    g.flow.data_mut()[2 * i + 1] += gd * dds_dv;
                    let dsd = g.depth_s.data_mut();
                    for (j, wt) in tap.weights(w) {
                        dsd[j] += gd * wt;
                    }
                    g.rigid.depth_hat[i] -= gd;
                }
            }
        }
    }
    let term = |sum: f64, norm: f64, weight: f64, on: bool| {
        if !on {
            TermValue::default()
        } else if weight < NORMALIZATION_EPS {
            TermValue::empty()
        } else {
            TermValue {
                value: sum * norm,
                count: weight,
                empty: false,
            }
        }
    };
    ConsistencyValues {
        depth: term(s_dc, n_dc, w_dc, want_dc),
        flow_rigid: term(s_mc, n_mc, w_mc, want_mc),
        flow_occluded: term(s_fc, n_fc, w_fc, want_fc),
    }
}
