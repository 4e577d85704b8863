//! Holistic motion parsing: splits per-pixel 3D motion into the part
//! explained by camera motion and a residual dynamic part, and derives the
//! visibility and soft moving-object masks. Nothing here is tunable beyond
//! the mask scale `alpha_s`.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, MIN_DEPTH};
use crate::imaging::{forward_splat_weights, BilinearTap, Field, Mask};

/// A target pixel is visible when it receives more than this fraction of a
/// full splat deposit.
pub const VISIBILITY_THRESHOLD: f64 = 0.25;

/// Default `||M_d||` threshold for binary moving-object segmentation.
pub const SEGMENTATION_THRESHOLD: f64 = 3.0;

/// Visibility of target pixels given the backward flow (source to target):
/// 1 where the forward-splatted weight exceeds [`VISIBILITY_THRESHOLD`].
pub fn visibility_mask(flow_s_to_t: &Field) -> Result<Field> {
    flow_s_to_t.check_channels(2, "backward flow")?;
    Ok(forward_splat_weights(flow_s_to_t).map(|w| if w > VISIBILITY_THRESHOLD { 1.0 } else { 0.0 }))
}

fn check_depth(depth: &Field, k: &CameraIntrinsics, what: &str) -> Result<()> {
    depth.check_channels(1, what)?;
    k.check_field(depth, what)?;
    if let Some(bad) = depth.data().iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::domain(format!(
            "{what} must be positive and finite, found {bad}"
        )));
    }
    Ok(())
}

/// Rigid background motion `T phi(p|D_t) - phi(p|D_t)` (three channels),
/// with a flag that is false where the transformed point is behind the camera.
pub fn rigid_motion_map(depth_t: &Field, pose: &Pose, k: &CameraIntrinsics) -> Result<(Field, Mask)> {
    check_depth(depth_t, k, "target depth")?;
    let (w, h) = (depth_t.width(), depth_t.height());
    let mut m_b = Field::new(w, h, 3);
    let mut valid = Mask::new(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let p = k.ray(x as f64, y as f64) * depth_t.at(x, y);
            let q = pose.transform(&p);
            if q.z <= MIN_DEPTH {
                valid.set(x, y, false);
            }
            let d = q - p;
            for c in 0..3 {
                m_b.set(x, y, c, d[c]);
            }
        }
    }
    Ok((m_b, valid))
}

/// Dynamic motion on visible pixels,
/// `V(p) [phi(p + F(p) | D_s) - T phi(p | D_t)]`, expressed in the source
/// camera frame. `D_s` is sampled bilinearly at `p + F(p)`; pixels whose
/// flow target leaves the image or whose rigid point is behind the camera
/// are flagged invalid and carry zero motion.
pub fn dynamic_motion_map(
    depth_t: &Field,
    depth_s: &Field,
    flow_t_to_s: &Field,
    pose: &Pose,
    k: &CameraIntrinsics,
    v: &Field,
) -> Result<(Field, Mask)> {
    check_depth(depth_t, k, "target depth")?;
    check_depth(depth_s, k, "source depth")?;
    flow_t_to_s.check_channels(2, "forward flow")?;
    k.check_field(flow_t_to_s, "forward flow")?;
    k.check_field(v, "visibility")?;
    let (w, h) = (depth_t.width(), depth_t.height());
    let mut m_d = Field::new(w, h, 3);
    let mut valid = Mask::new(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let (us, vs) = (x as f64 + flow_t_to_s.get(x, y, 0), y as f64 + flow_t_to_s.get(x, y, 1));
            let tap = BilinearTap::new(us, vs, w, h);
            let rigid = pose.transform(&(k.ray(x as f64, y as f64) * depth_t.at(x, y)));
            if !tap.in_bounds || rigid.z <= MIN_DEPTH {
                valid.set(x, y, false);
                continue;
            }
            let vis = v.at(x, y);
            if vis == 0.0 {
                continue;
            }
            let tracked = k.ray(us, vs) * tap.value(depth_s, 0);
            let d = (tracked - rigid) * vis;
            for c in 0..3 {
                m_d.set(x, y, c, d[c]);
            }
        }
    }
    Ok((m_d, valid))
}

/// Soft moving-object mask `1 - exp(-alpha_s ||m_d||)`.
pub fn moving_mask(m_d: &Field, alpha_s: f64) -> Result<Field> {
    if !(alpha_s >= 0.0) || !alpha_s.is_finite() {
        return Err(Error::domain(format!(
            "alpha_s must be a finite non-negative number, got {alpha_s}"
        )));
    }
    Ok(m_d.norm().map(|n| -(-alpha_s * n).exp_m1()))
}

/// `||m_d|| > threshold`.
pub fn binary_segmentation(m_d: &Field, threshold: f64) -> Mask {
    let n = m_d.norm();
    Mask::from_fn(n.width(), n.height(), |x, y| n.at(x, y) > threshold)
}

/// Everything the parser needs for one target/source frame pair.
#[derive(Debug, Clone, Copy)]
pub struct HmpInputs<'a> {
    pub depth_t: &'a Field,
    pub depth_s: &'a Field,
    pub flow_t_to_s: &'a Field,
    pub flow_s_to_t: &'a Field,
    pub pose: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
    pub alpha_s: f64,
}

/// Parser output for the target frame.
#[derive(Debug, Clone)]
pub struct HmpOutput {
    /// Rigid background motion (3 channels, scene units).
    pub m_b: Field,
    /// Dynamic motion on visible pixels (3 channels, source camera frame).
    pub m_d: Field,
    /// Visibility in {0, 1}.
    pub v: Field,
    /// Soft moving-object mask in [0, 1).
    pub s: Field,
    /// False where the rigid point is behind the camera or the flow leaves
    /// the image; such pixels are excluded from every loss.
    pub valid: Mask,
}

impl HmpOutput {
    pub fn segmentation(&self, threshold: f64) -> Mask {
        binary_segmentation(&self.m_d, threshold)
    }
}

pub fn parse(inputs: &HmpInputs<'_>) -> Result<HmpOutput> {
    let k = inputs.intrinsics;
    k.check_field(inputs.flow_s_to_t, "backward flow")?;
    let v = visibility_mask(inputs.flow_s_to_t)?;
    let (m_b, rigid_ok) = rigid_motion_map(inputs.depth_t, inputs.pose, k)?;
    let (m_d, valid) = dynamic_motion_map(inputs.depth_t, inputs.depth_s, inputs.flow_t_to_s, inputs.pose, k, &v)?;
    let s = moving_mask(&m_d, inputs.alpha_s)?;
    Ok(HmpOutput {
        m_b,
        m_d,
        v,
        s,
        valid: valid.and(&rigid_ok),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rigid_flow_field;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 9.5, 7.5, 20, 16).unwrap()
    }

    #[test]
    fn visibility_of_zero_flow_is_full() {
        let v = visibility_mask(&Field::new(20, 16, 2)).unwrap();
        assert!(v.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn visibility_when_everything_leaves() {
        let v = visibility_mask(&Field::from_fn2(20, 16, |_, _| [20.0, 0.0])).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rigid_motion_examples() {
        let depth = Field::from_fn(20, 16, |x, y| 3.0 + 0.05 * (x + y) as f64);
        let (mb, _) = rigid_motion_map(&depth, &Pose::identity(), &k()).unwrap();
        assert!(mb.max_abs() == 0.0);

        let t = Pose::from_translation([0.3, -0.2, 0.5]);
        let (mb, _) = rigid_motion_map(&depth, &t, &k()).unwrap();
        for px in mb.data().chunks(3) {
            assert!((px[0] - 0.3).abs() < 1e-12 && (px[1] + 0.2).abs() < 1e-12 && (px[2] - 0.5).abs() < 1e-12);
        }

        let rot = Pose::from_twist(&[0.0, 0.0, 0.0, 0.02, -0.03, 0.05]).unwrap();
        let (mb, _) = rigid_motion_map(&depth, &rot, &k()).unwrap();
        let r_minus_i = rot.rotation - nalgebra::Matrix3::identity();
        for y in 0..16 {
            for x in 0..20 {
                let p = k().ray(x as f64, y as f64) * depth.at(x, y);
                let e = r_minus_i * p;
                for c in 0..3 {
                    assert!((mb.get(x, y, c) - e[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn static_consistency_gives_zero_dynamic_motion() {
        // Fronto-parallel plane under pure translation: source depth is the
        // constant projected depth and the flow equals the rigid flow.
        let depth_t = Field::filled(20, 16, 1, 4.0);
        let pose = Pose::from_translation([0.2, 0.1, 0.3]);
        let rf = rigid_flow_field(&depth_t, &pose, &k()).unwrap();
        let depth_s = Field::filled(20, 16, 1, 4.3);
        let v = Field::filled(20, 16, 1, 1.0);
        let (md, valid) = dynamic_motion_map(&depth_t, &depth_s, &rf.flow, &pose, &k(), &v).unwrap();
        assert!(valid.count() > 0);
        assert!(md.max_abs() < 1e-9);
    }

    #[test]
    fn invisible_pixels_carry_no_motion() {
        let depth_t = Field::filled(20, 16, 1, 4.0);
        let depth_s = Field::filled(20, 16, 1, 9.0);
        let flow = Field::filled(20, 16, 2, 0.5);
        let v = Field::new(20, 16, 1);
        let (md, _) = dynamic_motion_map(&depth_t, &depth_s, &flow, &Pose::identity(), &k(), &v).unwrap();
        assert_eq!(md.max_abs(), 0.0);
    }

    #[test]
    fn moving_mask_values() {
        let mut md = Field::new(2, 2, 3);
        md.set(1, 0, 0, 3.0);
        md.set(0, 1, 1, 4.0);
        md.set(0, 1, 2, 3.0);
        let s = moving_mask(&md, 0.01).unwrap();
        assert_eq!(s.at(0, 0), 0.0);
        assert!((s.at(1, 0) - 0.029_554_466_451_491_823).abs() < 1e-15);
        assert!(moving_mask(&md, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(moving_mask(&md, -1.0).is_err());
        let seg = binary_segmentation(&md, 3.0);
        assert!(!seg.get(1, 0) && seg.get(0, 1));
    }

    #[test]
    fn parse_identity_inputs() {
        let depth = Field::filled(20, 16, 1, 5.0);
        let zero = Field::new(20, 16, 2);
        let out = parse(&HmpInputs {
            depth_t: &depth,
            depth_s: &depth,
            flow_t_to_s: &zero,
            flow_s_to_t: &zero,
            pose: &Pose::identity(),
            intrinsics: &k(),
            alpha_s: 0.01,
        })
        .unwrap();
        assert_eq!(out.m_b.max_abs(), 0.0);
        assert!(out.m_d.max_abs() < 1e-12);
        assert!(out.v.data().iter().all(|&v| v == 1.0));
        assert!(out.s.max_abs() < 1e-12);
    }
}
