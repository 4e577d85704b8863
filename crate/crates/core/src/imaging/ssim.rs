use super::Field;
use crate::error::Result;

/// SSIM stabilizer for the luminance term on `[0, 1]` intensities.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// SSIM stabilizer for the contrast/structure term.
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Statistics of one 3x3 window, truncated at the image border.
struct Window {
    n: f64,
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

#[inline]
fn window_range(c: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    c.saturating_sub(1)..=(c + 1).min(n - 1)
}

fn window(a: &Field, b: &Field, x: usize, y: usize) -> Window {
    let (w, h) = (a.width(), a.height());
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in window_range(y, h) {
        for xx in window_range(x, w) {
            let (va, vb) = (a.at(xx, yy), b.at(xx, yy));
            n += 1.0;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let mu_a = sa / n;
    let mu_b = sb / n;
    Window {
        n,
        mu_a,
        mu_b,
        var_a: saa / n - mu_a * mu_a,
        var_b: sbb / n - mu_b * mu_b,
        cov: sab / n - mu_a * mu_b,
    }
}

impl Window {
    fn parts(&self) -> (f64, f64, f64, f64) {
        let num_l = 2.0 * self.mu_a * self.mu_b + SSIM_C1;
        let num_s = 2.0 * self.cov + SSIM_C2;
        let den_l = self.mu_a * self.mu_a + self.mu_b * self.mu_b + SSIM_C1;
        let den_s = self.var_a + self.var_b + SSIM_C2;
        (num_l, num_s, den_l, den_s)
    }

    fn ssim(&self) -> f64 {
        let (nl, ns, dl, ds) = self.parts();
        (nl * ns) / (dl * ds)
    }
}

/// Per-pixel SSIM over 3x3 uniform windows (truncated at borders).
pub fn ssim_map(a: &Field, b: &Field) -> Result<Field> {
    a.check_grid(b, "second SSIM operand")?;
    a.check_channels(1, "SSIM operand")?;
    b.check_channels(1, "SSIM operand")?;
    let (w, h) = (a.width(), a.height());
    Ok(Field::from_fn(w, h, |x, y| window(a, b, x, y).ssim()))
}

/// Gradient of `sum_p upstream(p) * SSIM_p(a, b)` with respect to `b`.
///
/// Pixels with a zero upstream weight are skipped, which is what makes a
/// masked structural loss independent of content under the mask.
pub fn ssim_map_masked_backward(a: &Field, b: &Field, upstream: &Field) -> Field {
    let (w, h) = (a.width(), a.height());
    let mut grad = Field::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let g = upstream.at(x, y);
            if g == 0.0 {
                continue;
            }
            let win = window(a, b, x, y);
            let (nl, ns, dl, ds) = win.parts();
            let s = (nl * ns) / (dl * ds);
            let d_mu_b = 2.0 * win.mu_a * ns / (dl * ds) - s * 2.0 * win.mu_b / dl;
            let d_cov = 2.0 * nl / (dl * ds);
            let d_var_b = -s / ds;
            let scale = g / win.n;
            let gd = grad.data_mut();
            for yy in window_range(y, h) {
                for xx in window_range(x, w) {
                    let (va, vb) = (a.at(xx, yy), b.at(xx, yy));
                    gd[yy * w + xx] += scale * (d_mu_b + d_var_b * 2.0 * (vb - win.mu_b) + d_cov * (va - win.mu_a));
                }
            }
        }
    }
    grad
}
