use super::Field;
use crate::error::{Error, Result};

/// Number of scales used by every multi-scale loss.
pub const PYRAMID_LEVELS: usize = 4;

/// Four-level pyramid; level `l` is `ceil(W / 2^l) x ceil(H / 2^l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<Field>,
}

impl ImagePyramid {
    pub fn level(&self, l: usize) -> &Field {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// 2x2 average pooling; odd trailing rows/columns average what exists.
pub fn avg_pool_2x2(field: &Field) -> Field {
    let (w, h, ch) = (field.width(), field.height(), field.channels());
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Field::new(nw, nh, ch);
    for y in 0..nh {
        for x in 0..nw {
            let xs = 2 * x..(2 * x + 2).min(w);
            let ys = 2 * y..(2 * y + 2).min(h);
            let count = (xs.len() * ys.len()) as f64;
            for c in 0..ch {
                let mut s = 0.0;
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        s += field.get(xx, yy, c);
                    }
                }
                out.set(x, y, c, s / count);
            }
        }
    }
    out
}

/// Transpose of [`avg_pool_2x2`] onto a `width x height` grid.
pub fn avg_pool_2x2_adjoint(upstream: &Field, width: usize, height: usize) -> Field {
    let ch = upstream.channels();
    let mut out = Field::new(width, height, ch);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x / 2, y / 2);
            let cw = (2 * px + 2).min(width) - 2 * px;
            let chh = (2 * py + 2).min(height) - 2 * py;
            let count = (cw * chh) as f64;
            for c in 0..ch {
                out.set(x, y, c, upstream.get(px, py, c) / count);
            }
        }
    }
    out
}

fn check_size(field: &Field) -> Result<()> {
    if field.width() < 8 || field.height() < 8 {
        return Err(Error::domain(format!(
            "a {}-level pyramid needs at least 8x8 pixels, got {}x{}",
            PYRAMID_LEVELS,
            field.width(),
            field.height()
        )));
    }
    Ok(())
}

/// Pyramid of a field whose values do not depend on resolution
/// (intensity, depth, masks).
pub fn build_pyramid(field: &Field) -> Result<ImagePyramid> {
    check_size(field)?;
    let mut levels = vec![field.clone()];
    for l in 1..PYRAMID_LEVELS {
        let next = avg_pool_2x2(&levels[l - 1]);
        levels.push(next);
    }
    Ok(ImagePyramid { levels })
}

/// Pyramid of a displacement field measured in pixels: each level is pooled
/// and halved so that it stays in that level's pixel units.
pub fn build_flow_pyramid(flow: &Field) -> Result<ImagePyramid> {
    check_size(flow)?;
    let mut levels = vec![flow.clone()];
    for l in 1..PYRAMID_LEVELS {
        let next = avg_pool_2x2(&levels[l - 1]).scale(0.5);
        levels.push(next);
    }
    Ok(ImagePyramid { levels })
}
