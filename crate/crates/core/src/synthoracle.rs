//! Synthetic scenes with exact ground truth and brute-force reference
//! computations (ray-cast occlusion, analytic flow, numeric gradients).
//!
//! The world frame is the target camera frame. The source camera sees
//! `X_s = R X + t`; a moving box is displaced by `motion` (world frame)
//! between the target and source instants. Surface colors are attached to
//! the surfaces by sampling a value-noise lattice at each surface point's
//! source-image projection, so sampling the source image along the ground
//! truth correspondence reproduces the target exactly away from edges.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::hmp::VISIBILITY_THRESHOLD;
use crate::imaging::{BilinearTap, Field, ImagePyramid, Mask, PYRAMID_LEVELS};

/// Default desk-scale camera: 64x64, 48 px focal length, centered.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(48.0, 48.0, 31.5, 31.5, 64, 64).unwrap()
}

/// Planar axis-aligned rectangle parallel to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    /// World `(X, Y)` of the center at the target instant.
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    /// World `Z` at the target instant.
    pub depth: f64,
    /// World-frame displacement between the target and source instants.
    pub motion: Vector3<f64>,
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Background,
    Box,
}

/// Scene geometry: a fronto-parallel background plane and an optional box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub background_depth: f64,
    pub moving_box: Option<BoxSpec>,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    surface: Surface,
    /// Hit point at the target instant (world frame).
    point: Vector3<f64>,
    /// Depth in the viewing camera.
    depth: f64,
}

impl SceneGeometry {
    fn offset(&self, surface: Surface, at_source: bool) -> Vector3<f64> {
        match (surface, &self.moving_box, at_source) {
            (Surface::Box, Some(b), true) => b.motion,
            _ => Vector3::zeros(),
        }
    }

    /// Nearest surface along the pixel ray of a camera with world-to-camera
    /// pose `cam`, at the target or the source instant.
    fn cast(&self, k: &CameraIntrinsics, cam: &Pose, u: f64, v: f64, at_source: bool) -> Option<Hit> {
        let rt = cam.rotation.transpose();
        let origin = -(rt * cam.translation);
        let dir = rt * k.ray(u, v);
        if dir.z.abs() < 1e-15 {
            return None;
        }
        let mut best: Option<(f64, Surface)> = None;
        let lambda = (self.background_depth - origin.z) / dir.z;
        if lambda > 0.0 {
            best = Some((lambda, Surface::Background));
        }
        if let Some(b) = &self.moving_box {
            let off = if at_source { b.motion } else { Vector3::zeros() };
            let lambda = (b.depth + off.z - origin.z) / dir.z;
            if lambda > 0.0 && best.is_none_or(|(l, _)| lambda < l) {
                let p = origin + dir * lambda - off;
                if (p.x - b.center[0]).abs() <= b.half_size[0] && (p.y - b.center[1]).abs() <= b.half_size[1] {
                    best = Some((lambda, Surface::Box));
                }
            }
        }
        best.map(|(lambda, surface)| {
            let world = origin + dir * lambda;
            Hit {
                surface,
                point: world - self.offset(surface, at_source),
                depth: cam.transform(&world).z,
            }
        })
    }
}

/// Optional third (stereo) view captured at the target instant.
#[derive(Debug, Clone)]
pub struct StereoView {
    pub image: Field,
    /// Natively rendered pyramid; level 0 is `image`.
    pub pyramid: ImagePyramid,
    /// Target-to-stereo camera pose.
    pub pose: Pose,
    pub baseline: f64,
}

/// A rendered frame pair with all ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub geometry: SceneGeometry,
    pub target: Field,
    pub source: Field,
    /// Natively rendered image pyramids; level 0 equals `target`/`source`.
    pub target_pyramid: ImagePyramid,
    pub source_pyramid: ImagePyramid,
    pub stereo: Option<StereoView>,
    pub depth_t: Field,
    pub depth_s: Field,
    /// Target-to-source camera pose.
    pub pose: Pose,
    pub flow_t_to_s: Field,
    pub flow_s_to_t: Field,
    /// True where the target pixel has no visible preimage in the source.
    pub occluded: Mask,
    /// True on target pixels showing the moving box.
    pub moving: Mask,
    /// True on source pixels showing the moving box.
    pub source_moving: Mask,
    texture_seed: u64,
}

impl SyntheticScene {
    /// Ground-truth 3D object motion expressed in the source camera frame,
    /// i.e. the value the dynamic motion map takes on box pixels.
    pub fn object_motion_source(&self) -> Vector3<f64> {
        self.pose.rotation * self.object_motion()
    }

    /// Ground-truth object motion in the world (target) frame.
    pub fn object_motion(&self) -> Vector3<f64> {
        self.geometry
            .moving_box
            .map(|b| b.motion)
            .unwrap_or_else(Vector3::zeros)
    }

    /// Per-pixel ground-truth dynamic motion (3 channels, source frame).
    pub fn dynamic_motion(&self) -> Field {
        let m = self.object_motion_source();
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut out = Field::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                if self.moving.get(x, y) {
                    for c in 0..3 {
                        out.set(x, y, c, m[c]);
                    }
                }
            }
        }
        out
    }

    /// Visible target pixels whose bilinear source footprint lies inside the
    /// image and shows only the surface the target pixel shows. Warping is
    /// exact there.
    pub fn interior_visible(&self) -> Mask {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        Mask::from_fn(w, h, |x, y| {
            if self.occluded.get(x, y) {
                return false;
            }
            let (u, v) = (
                x as f64 + self.flow_t_to_s.get(x, y, 0),
                y as f64 + self.flow_t_to_s.get(x, y, 1),
            );
            let tap = BilinearTap::new(u, v, w, h);
            let on_box = self.moving.get(x, y);
            tap.in_bounds
                && tap
                    .weights(w)
                    .iter()
                    .all(|&(i, wt)| wt == 0.0 || self.source_moving.data()[i] == on_box)
        })
    }

    /// Adds a rectified stereo view displaced by `baseline` along +x.
    pub fn with_stereo(mut self, baseline: f64) -> Result<Self> {
        if !(baseline > 0.0) {
            return Err(Error::domain(format!("stereo baseline must be > 0, got {baseline}")));
        }
        let pose = Pose::from_translation([-baseline, 0.0, 0.0]);
        let pyramid = paint_pyramid(
            &self.geometry,
            &self.intrinsics,
            &self.pose,
            &pose,
            false,
            self.texture_seed,
        )?;
        let image = pyramid.levels[0].clone();
        self.stereo = Some(StereoView {
            image,
            pyramid,
            pose,
            baseline,
        });
        Ok(self)
    }
}

/// Smooth value noise sampled on the integer pixel grid, values in [0.1, 0.9].
pub fn value_noise(width: usize, height: usize, cell: f64, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = (width as f64 / cell).ceil() as usize + 2;
    let ny = (height as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..nx * ny).map(|_| rng.random_range(0.1..0.9)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Field::from_fn(width, height, |x, y| {
        let (gx, gy) = (x as f64 / cell, y as f64 / cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let at = |i: usize, j: usize| lattice[j * nx + i];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Intensity ranges of the background and the box in box scenes.
const BOX_SCENE_BANDS: ((f64, f64), (f64, f64)) = ((0.1, 0.45), (0.55, 0.9));

struct Textures {
    background: Field,
    moving_box: Field,
}

impl Textures {
    /// Lattices for pyramid level `level`, laid out on that level's source
    /// pixel grid with the same cell size at every level. With `banded`, the
    /// background is darker than the box so the box outline is an image edge.
    fn new(k: &CameraIntrinsics, seed: u64, level: usize, banded: bool) -> Self {
        let base = seed.wrapping_mul(8).wrapping_add(2 * level as u64);
        let background = value_noise(k.width, k.height, 5.0, base.wrapping_add(1));
        let moving_box = value_noise(k.width, k.height, 4.0, base.wrapping_add(2));
        if !banded {
            return Self { background, moving_box };
        }
        let (lo, hi) = BOX_SCENE_BANDS;
        Self {
            background: background.map(|v| lo.0 + (v - 0.1) / 0.8 * (lo.1 - lo.0)),
            moving_box: moving_box.map(|v| hi.0 + (v - 0.1) / 0.8 * (hi.1 - hi.0)),
        }
    }

    /// Color of a surface point: its texture lattice read at the point's
    /// source-image projection.
    fn color(&self, geo: &SceneGeometry, pose: &Pose, k: &CameraIntrinsics, hit: &Hit) -> f64 {
        let q = pose.transform(&(hit.point + geo.offset(hit.surface, true)));
        let p = k.project_unchecked(&q);
        let tex = match hit.surface {
            Surface::Background => &self.background,
            Surface::Box => &self.moving_box,
        };
        BilinearTap::new(p.u, p.v, k.width, k.height).value(tex, 0)
    }
}

struct Render {
    hits: Vec<Hit>,
}

fn render(geo: &SceneGeometry, k: &CameraIntrinsics, cam: &Pose, at_source: bool) -> Result<Render> {
    let mut hits = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let hit = geo.cast(k, cam, x as f64, y as f64, at_source).ok_or_else(|| {
                Error::domain(format!(
                    "pixel ({x}, {y}) sees no surface; background plane behind camera"
                ))
            })?;
            hits.push(hit);
        }
    }
    Ok(Render { hits })
}

/// Renders the images of one view at every pyramid level; each level is
/// textured on its own grid so ground-truth warps are exact at every scale.
fn paint_pyramid(
    geo: &SceneGeometry,
    k: &CameraIntrinsics,
    scene_pose: &Pose,
    view: &Pose,
    at_source: bool,
    seed: u64,
) -> Result<ImagePyramid> {
    let levels = (0..PYRAMID_LEVELS)
        .map(|l| {
            let kl = k.level(l);
            let tex = Textures::new(&kl, seed, l, geo.moving_box.is_some());
            let r = render(geo, &kl, view, at_source)?;
            Ok(Field::from_fn(kl.width, kl.height, |x, y| {
                tex.color(geo, scene_pose, &kl, &r.hits[y * kl.width + x])
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImagePyramid { levels })
}

/// Exact target-to-source correspondence of every target pixel, regardless
/// of visibility.
pub fn analytic_flow_oracle(scene: &SyntheticScene) -> Result<Field> {
    let k = &scene.intrinsics;
    let r = render(&scene.geometry, k, &Pose::identity(), false)?;
    Ok(forward_flow(&scene.geometry, k, &scene.pose, &r))
}

fn forward_flow(geo: &SceneGeometry, k: &CameraIntrinsics, pose: &Pose, r: &Render) -> Field {
    Field::from_fn2(k.width, k.height, |x, y| {
        let hit = &r.hits[y * k.width + x];
        let q = pose.transform(&(hit.point + geo.offset(hit.surface, true)));
        let p = k.project_unchecked(&q);
        [p.u - x as f64, p.v - y as f64]
    })
}

/// Occlusion by z-buffer rendering: the source view is ray cast on its
/// pixel grid, and a target pixel counts as visible when source pixels
/// showing its surface cover its projection with more than
/// [`VISIBILITY_THRESHOLD`] of a bilinear pixel footprint. Pixels outside the
/// source image cover nothing.
pub fn occlusion_oracle(scene: &SyntheticScene) -> Result<Mask> {
    let k = &scene.intrinsics;
    let target = render(&scene.geometry, k, &Pose::identity(), false)?;
    let source = render(&scene.geometry, k, &scene.pose, true)?;
    Ok(occlusion_from(&scene.geometry, k, &scene.pose, &target, &source))
}

fn occlusion_from(geo: &SceneGeometry, k: &CameraIntrinsics, pose: &Pose, target: &Render, source: &Render) -> Mask {
    let (w, h) = (k.width as i64, k.height as i64);
    Mask::from_fn(k.width, k.height, |x, y| {
        let hit = &target.hits[y * k.width + x];
        let q = pose.transform(&(hit.point + geo.offset(hit.surface, true)));
        if q.z <= 0.0 {
            return true;
        }
        let p = k.project_unchecked(&q);
        if !(p.u.is_finite() && p.v.is_finite()) {
            return true;
        }
        let (x0, y0) = (p.u.floor(), p.v.floor());
        let (fx, fy) = (p.u - x0, p.v - y0);
        let mut cover = 0.0;
        for (dx, dy, wt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (sx, sy) = (x0 as i64 + dx, y0 as i64 + dy);
            if sx >= 0 && sy >= 0 && sx < w && sy < h && source.hits[(sy * w + sx) as usize].surface == hit.surface {
                cover += wt;
            }
        }
        cover <= VISIBILITY_THRESHOLD
    })
}

fn build(k: &CameraIntrinsics, geometry: SceneGeometry, pose: &Pose, texture_seed: u64) -> Result<SyntheticScene> {
    let target_r = render(&geometry, k, &Pose::identity(), false)?;
    let source_r = render(&geometry, k, pose, true)?;
    let target_pyramid = paint_pyramid(&geometry, k, pose, &Pose::identity(), false, texture_seed)?;
    let source_pyramid = paint_pyramid(&geometry, k, pose, pose, true, texture_seed)?;
    let depth = |r: &Render| Field::from_fn(k.width, k.height, |x, y| r.hits[y * k.width + x].depth);
    if source_r.hits.iter().any(|h| h.depth <= 0.0) {
        return Err(Error::domain("source view sees a surface behind the camera"));
    }
    let flow_s_to_t = Field::from_fn2(k.width, k.height, |x, y| {
        let hit = &source_r.hits[y * k.width + x];
        let p = k.project_unchecked(&hit.point);
        [p.u - x as f64, p.v - y as f64]
    });
    let on_box = |r: &Render| {
        Mask::from_fn(k.width, k.height, |x, y| {
            r.hits[y * k.width + x].surface == Surface::Box
        })
    };
    Ok(SyntheticScene {
        intrinsics: *k,
        target: target_pyramid.levels[0].clone(),
        source: source_pyramid.levels[0].clone(),
        target_pyramid,
        source_pyramid,
        stereo: None,
        depth_t: depth(&target_r),
        depth_s: depth(&source_r),
        pose: *pose,
        flow_t_to_s: forward_flow(&geometry, k, pose, &target_r),
        flow_s_to_t,
        occluded: occlusion_from(&geometry, k, pose, &target_r, &source_r),
        moving: on_box(&target_r),
        source_moving: on_box(&source_r),
        geometry,
        texture_seed,
    })
}

/// Textured fronto-parallel plane at `plane_depth` seen by both cameras.
pub fn make_static_scene(
    k: &CameraIntrinsics,
    plane_depth: f64,
    texture_seed: u64,
    pose: &Pose,
) -> Result<SyntheticScene> {
    if !(plane_depth > 0.0) || !plane_depth.is_finite() {
        return Err(Error::domain(format!(
            "plane depth must be positive, got {plane_depth}"
        )));
    }
    let geometry = SceneGeometry {
        background_depth: plane_depth,
        moving_box: None,
    };
    build(k, geometry, pose, texture_seed)
}

/// Background plane plus an independently translating box.
pub fn make_moving_box_scene(
    k: &CameraIntrinsics,
    background_depth: f64,
    moving_box: &BoxSpec,
    pose: &Pose,
    texture_seed: u64,
) -> Result<SyntheticScene> {
    if !(background_depth > 0.0) || !background_depth.is_finite() {
        return Err(Error::domain(format!(
            "background depth must be positive, got {background_depth}"
        )));
    }
    if !(moving_box.half_size[0] > 0.0 && moving_box.half_size[1] > 0.0) {
        return Err(Error::domain("box has zero area"));
    }
    let behind = |z: f64| !(z > 0.0 && z < background_depth);
    if behind(moving_box.depth) || behind(moving_box.depth + moving_box.motion.z) {
        return Err(Error::domain(format!(
            "box depth {} must lie strictly between the camera and the background at {background_depth}",
            moving_box.depth
        )));
    }
    let geometry = SceneGeometry {
        background_depth,
        moving_box: Some(*moving_box),
    };
    build(k, geometry, pose, texture_seed)
}

/// The reference moving-box scene: background at 120, box at 60 occupying
/// about 26x26 pixels, camera translating along x, box moving along y.
pub fn default_moving_box_scene(seed: u64) -> Result<SyntheticScene> {
    let k = default_intrinsics();
    let b = BoxSpec {
        center: [0.0, 0.0],
        half_size: [16.25, 16.25],
        depth: 60.0,
        motion: Vector3::new(0.0, 4.0, 0.0),
    };
    make_moving_box_scene(&k, 120.0, &b, &Pose::from_translation([3.0, 0.0, 0.0]), seed)
}

/// Random static plane near unit depth with a small camera translation and
/// in-plane rotation (both depth maps stay constant).
pub fn random_static_scene(seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57a7);
    let k = default_intrinsics();
    let depth = rng.random_range(0.9..1.1);
    let xi = [
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.03..0.03),
        0.0,
        0.0,
        rng.random_range(-0.02..0.02),
    ];
    make_static_scene(&k, depth, seed, &Pose::from_twist(&xi)?)
}

/// Random 64x64 moving-box scene: box moves mostly vertically with
/// `||motion|| > 3`, camera translates mostly horizontally.
pub fn random_moving_box_scene(seed: u64) -> Result<SyntheticScene> {
    random_moving_box_scene_with(seed, 64, (11.0 / 64.0, 14.0 / 64.0))
}

/// Random moving-box scene on a `size x size` image whose box half-width
/// is drawn from `half_fraction` (fractions of the image size).
pub fn random_moving_box_scene_with(seed: u64, size: usize, half_fraction: (f64, f64)) -> Result<SyntheticScene> {
    if size < 8 || !(0.0 < half_fraction.0 && half_fraction.0 < half_fraction.1 && half_fraction.1 < 0.5) {
        return Err(Error::domain("need size >= 8 and 0 < box fraction range < 0.5"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0c5_b0c5);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let k = CameraIntrinsics::new(0.75 * s, 0.75 * s, c, c, size, size)?;
    let bg = rng.random_range(100.0..140.0);
    let depth: f64 = rng.random_range(50.0..70.0);
    let half = rng.random_range(half_fraction.0..half_fraction.1) * s * depth / k.fx;
    let cx = rng.random_range(-0.08..0.08) * s * depth / k.fx;
    let cy = rng.random_range(-0.08..0.08) * s * depth / k.fx;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let motion = Vector3::new(rng.random_range(-1.0..1.0), sign * rng.random_range(3.5..5.0), 0.0);
    let tx = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(2.0..4.0);
    let xi = [
        tx,
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..1.0),
        0.0,
        0.0,
        rng.random_range(-0.01..0.01),
    ];
    let b = BoxSpec {
        center: [cx, cy],
        half_size: [half, half],
        depth,
        motion,
    };
    make_moving_box_scene(&k, bg, &b, &Pose::from_twist(&xi)?, seed)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for
/// every coordinate.
pub fn numeric_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    numeric_gradient_at(f, x, &all, eps)
}

/// Central differences at selected coordinates only.
pub fn numeric_gradient_at(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}
