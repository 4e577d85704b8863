//! Pinhole camera, rigid transforms, back-projection, projection and rigid
//! reprojection.
//!
//! Integer pixel coordinates address pixel centers and the homogeneous lift
//! of `(u, v)` is `(u, v, 1)`.

mod se3;

pub use se3::{Pose, PoseJacobian, Twist};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::imaging::{Field, Mask};

/// A 3D point in a camera frame (z forward).
pub type Point3 = Vector3<f64>;

/// Smallest depth accepted in front of the camera plane.
pub const MIN_DEPTH: f64 = 1e-12;

/// Continuous pixel coordinates; may lie outside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole intrinsics together with the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::domain(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::domain("principal point must be finite"));
        }
        if width < 2 || height < 2 {
            return Err(Error::domain(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics of pyramid level `level` under 2x2 average pooling.
    ///
    /// Pooling maps a fine pixel center `u` to `(u - 0.5) / 2`, hence the
    /// principal point shift.
    pub fn level(&self, level: usize) -> Self {
        let mut k = *self;
        for _ in 0..level {
            k = Self {
                fx: k.fx / 2.0,
                fy: k.fy / 2.0,
                cx: (k.cx - 0.5) / 2.0,
                cy: (k.cy - 0.5) / 2.0,
                width: k.width.div_ceil(2),
                height: k.height.div_ceil(2),
            };
        }
        k
    }

    /// `K^-1 h(p)`: the viewing ray through `p` with unit z.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Point3 {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// `depth * K^-1 h(p)`.
    pub fn back_project(&self, p: PixelCoord, depth: f64) -> Result<Point3> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::domain(format!("depth must be positive and finite, got {depth}")));
        }
        Ok(self.ray(p.u, p.v) * depth)
    }

    /// Perspective projection; returns the pixel and the projected depth.
    pub fn project(&self, x: &Point3) -> Result<(PixelCoord, f64)> {
        if x.z.abs() < MIN_DEPTH {
            return Err(Error::DegenerateProjection { z: x.z });
        }
        Ok((self.project_unchecked(x), x.z))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, x: &Point3) -> PixelCoord {
        PixelCoord::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    pub fn check_field(&self, field: &Field, what: &str) -> Result<()> {
        if field.width() != self.width || field.height() != self.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} (intrinsics)", self.width, self.height),
                actual: format!("{what} is {}x{}", field.width(), field.height()),
            });
        }
        Ok(())
    }

    /// Parses `fx fy cx cy width height`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(Error::parse(
                0,
                format!("expected 6 intrinsics values, found {}", tokens.len()),
            ));
        }
        let mut vals = [0.0f64; 6];
        for (i, tok) in tokens.iter().enumerate() {
            let offset = (tok.as_ptr() as usize - text.as_ptr() as usize) as u64;
            vals[i] = tok
                .parse()
                .map_err(|_| Error::parse(offset, format!("invalid number '{tok}'")))?;
        }
        let dim = |v: f64, name: &str| -> Result<usize> {
            if v.fract() != 0.0 || v < 0.0 {
                Err(Error::domain(format!("{name} must be a non-negative integer, got {v}")))
            } else {
                Ok(v as usize)
            }
        };
        Self::new(
            vals[0],
            vals[1],
            vals[2],
            vals[3],
            dim(vals[4], "width")?,
            dim(vals[5], "height")?,
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// Rigid correspondence of `p` under `pose`: the reprojected pixel `p_st`
/// and the projected depth in the second view. Out-of-image results are
/// returned as they are.
pub fn rigid_reproject(p: PixelCoord, depth: f64, pose: &Pose, k: &CameraIntrinsics) -> Result<(PixelCoord, f64)> {
    let x = pose.transform(&k.back_project(p, depth)?);
    if x.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok((k.project_unchecked(&x), x.z))
}

/// Dense rigid flow of a depth map.
#[derive(Debug, Clone)]
pub struct RigidFlow {
    /// `p_st - p` per pixel (two channels).
    pub flow: Field,
    /// Projected depth in the second view.
    pub projected_depth: Field,
    /// False where the transformed point lands behind the camera.
    pub valid: Mask,
}

/// Applies [`rigid_reproject`] at every pixel of `depth`.
pub fn rigid_flow_field(depth: &Field, pose: &Pose, k: &CameraIntrinsics) -> Result<RigidFlow> {
    depth.check_channels(1, "depth")?;
    k.check_field(depth, "depth")?;
    if let Some(bad) = depth.data().iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::domain(format!("depth must be positive and finite, found {bad}")));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut flow = Field::new(w, h, 2);
    let mut projected_depth = Field::new(w, h, 1);
    let mut valid = Mask::new(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let p = PixelCoord::new(x as f64, y as f64);
            match rigid_reproject(p, depth.at(x, y), pose, k) {
                Ok((q, z)) => {
                    flow.set(x, y, 0, q.u - p.u);
                    flow.set(x, y, 1, q.v - p.v);
                    projected_depth.set(x, y, 0, z);
                }
                Err(Error::BehindCamera { z }) => {
                    valid.set(x, y, false);
                    projected_depth.set(x, y, 0, z);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(RigidFlow {
        flow,
        projected_depth,
        valid,
    })
}
