//! Dense grids, sampling, warping, splatting, pyramids, derivatives and SSIM.
//!
//! Every grid is row-major with integer coordinates addressing pixel centers:
//! pixel `(x, y)` sits at continuous coordinate `(x, y)`, so the image
//! rectangle in continuous coordinates is `[0, W-1] x [0, H-1]` for sampling
//! and `[-0.5, W-0.5] x [-0.5, H-0.5]` for pixel footprints.

mod diff;
mod pyramid;
mod sample;
mod splat;
mod ssim;

pub use diff::{laplacian, laplacian_adjoint, second_difference_stencil, spatial_gradient};
pub use pyramid::{
    avg_pool_2x2, avg_pool_2x2_adjoint, build_flow_pyramid, build_pyramid, ImagePyramid, PYRAMID_LEVELS,
};
pub use sample::{bilinear_sample, inverse_warp, BilinearTap};
pub use splat::forward_splat_weights;
pub use ssim::{ssim_map, ssim_map_masked_backward, SSIM_C1, SSIM_C2};

use crate::error::{Error, Result};

/// A dense row-major grid with one or more channels per pixel.
///
/// Scalar fields (depth, intensity, masks) carry one channel; flow carries
/// two and 3D motion maps carry three.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    /// A zero-filled grid.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels > 0, "a field needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::domain("field needs at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height * channels),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a scalar field from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    /// Builds a two-channel field from a per-pixel function.
    pub fn from_fn2(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 2,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels (not values).
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = value;
    }

    /// Scalar value at pixel `(x, y)` of a one-channel field.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Fails unless `other` has the same width and height.
    pub fn check_grid(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{what} is {}x{}", other.width, other.height),
            })
        }
    }

    pub fn check_channels(&self, channels: usize, what: &str) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{what} with {channels} channel(s)"),
                actual: format!("{} channel(s)", self.channels),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Field {
        self.map(|v| v * factor)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Per-pixel Euclidean norm across channels.
    pub fn norm(&self) -> Field {
        let mut out = Field::new(self.width, self.height, 1);
        for (o, px) in out.data.iter_mut().zip(self.data.chunks(self.channels)) {
            *o = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        out
    }

    /// Elementwise `self += other * factor`.
    pub fn add_scaled(&mut self, other: &Field, factor: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
    }
}

/// A dense boolean grid, used for validity flags and binary segmentations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flags", width * height),
                actual: format!("{} flags", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// 1.0 where set, 0.0 elsewhere.
    pub fn to_field(&self) -> Field {
        Field {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Keeps a pixel only if every in-image pixel of its 3x3 neighborhood is set.
    pub fn erode3(&self) -> Mask {
        let (w, h) = (self.width, self.height);
        Mask::from_fn(w, h, |x, y| {
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if !self.get(xx, yy) {
                        return false;
                    }
                }
            }
            true
        })
    }

    /// Intersection over union with another mask; 1.0 when both are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}
