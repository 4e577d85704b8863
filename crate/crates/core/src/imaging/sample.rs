use super::{Field, Mask};
use crate::error::Result;
use crate::geometry::PixelCoord;

/// Precomputed bilinear footprint of a continuous coordinate.
///
/// Coordinates outside `[0, W-1] x [0, H-1]` are clamped to the edge and
/// reported through `in_bounds`; the derivative along a clamped axis is zero.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    pub in_bounds: bool,
    clamped_x: bool,
    clamped_y: bool,
}

fn axis(c: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let (cc, clamped) = if !c.is_finite() || c < 0.0 {
        (0.0, true)
    } else if c > hi {
        (hi, true)
    } else {
        (c, false)
    };
    if n == 1 {
        return (0, 0, 0.0, clamped);
    }
    let i0 = (cc.floor() as usize).min(n - 2);
    (i0, i0 + 1, cc - i0 as f64, clamped)
}

impl BilinearTap {
    pub fn new(u: f64, v: f64, width: usize, height: usize) -> Self {
        let (x0, x1, fx, clamped_x) = axis(u, width);
        let (y0, y1, fy, clamped_y) = axis(v, height);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            in_bounds: !clamped_x && !clamped_y,
            clamped_x,
            clamped_y,
        }
    }

    /// The four (pixel index, weight) pairs of the footprint.
    #[inline]
    pub fn weights(&self, width: usize) -> [(usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0 * width + self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0 * width + self.x1, fx * (1.0 - fy)),
            (self.y1 * width + self.x0, (1.0 - fx) * fy),
            (self.y1 * width + self.x1, fx * fy),
        ]
    }

    /// Interpolated value of channel `c`.
    #[inline]
    pub fn value(&self, field: &Field, c: usize) -> f64 {
        let (a, b, cc, d) = self.corners(field, c);
        let top = a * (1.0 - self.fx) + b * self.fx;
        let bot = cc * (1.0 - self.fx) + d * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }

    /// Interpolated value of channel `c` and its derivative with respect to
    /// the continuous coordinate `(u, v)`.
    #[inline]
    pub fn value_grad(&self, field: &Field, c: usize) -> (f64, f64, f64) {
        let (a, b, cc, d) = self.corners(field, c);
        let top = a * (1.0 - self.fx) + b * self.fx;
        let bot = cc * (1.0 - self.fx) + d * self.fx;
        let value = top * (1.0 - self.fy) + bot * self.fy;
        let du = if self.clamped_x {
            0.0
        } else {
            (b - a) * (1.0 - self.fy) + (d - cc) * self.fy
        };
        let dv = if self.clamped_y { 0.0 } else { bot - top };
        (value, du, dv)
    }

    #[inline]
    fn corners(&self, field: &Field, c: usize) -> (f64, f64, f64, f64) {
        (
            field.get(self.x0, self.y0, c),
            field.get(self.x1, self.y0, c),
            field.get(self.x0, self.y1, c),
            field.get(self.x1, self.y1, c),
        )
    }
}

/// Bilinear interpolation of every channel at `p`, with clamp-to-edge outside
/// the image and an explicit in-bounds flag.
pub fn bilinear_sample(field: &Field, p: PixelCoord) -> (Vec<f64>, bool) {
    let tap = BilinearTap::new(p.u, p.v, field.width(), field.height());
    let values = (0..field.channels()).map(|c| tap.value(field, c)).collect();
    (values, tap.in_bounds)
}

/// Synthesizes an image on the grid of `coords` by sampling `source` at the
/// absolute pixel coordinates stored in `coords` (two channels: u, v).
pub fn inverse_warp(source: &Field, coords: &Field) -> Result<(Field, Mask)> {
    coords.check_channels(2, "warp coordinates")?;
    let (w, h) = (coords.width(), coords.height());
    let mut out = Field::new(w, h, source.channels());
    let mut valid = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let tap = BilinearTap::new(
                coords.get(x, y, 0),
                coords.get(x, y, 1),
                source.width(),
                source.height(),
            );
            for c in 0..source.channels() {
                out.set(x, y, c, tap.value(source, c));
            }
            valid.set(x, y, tap.in_bounds);
        }
    }
    Ok((out, valid))
}
