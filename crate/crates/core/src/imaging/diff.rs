use super::Field;

/// Indices of the three-point second-difference stencil used at position `i`
/// along an axis of length `n`. Border positions reuse the nearest interior
/// stencil, so quadratics are differentiated exactly everywhere. Axes shorter
/// than three samples have no stencil.
#[inline]
pub fn second_difference_stencil(i: usize, n: usize) -> Option<[usize; 3]> {
    if n < 3 {
        return None;
    }
    let c = i.clamp(1, n - 2);
    Some([c - 1, c, c + 1])
}

/// Spatial gradient: central differences inside, one-sided at the borders.
/// Output has two channels per input channel, ordered `(d/du, d/dv)`.
pub fn spatial_gradient(field: &Field) -> Field {
    let (w, h, ch) = (field.width(), field.height(), field.channels());
    let mut out = Field::new(w, h, 2 * ch);
    let diff = |i: usize, n: usize, get: &dyn Fn(usize) -> f64| -> f64 {
        if n < 2 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            0.5 * (get(i + 1) - get(i - 1))
        }
    };
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let gx = diff(x, w, &|i| field.get(i, y, c));
                let gy = diff(y, h, &|j| field.get(x, j, c));
                out.set(x, y, 2 * c, gx);
                out.set(x, y, 2 * c + 1, gy);
            }
        }
    }
    out
}

/// Per-channel Laplacian from second differences along each axis.
pub fn laplacian(field: &Field) -> Field {
    let (w, h, ch) = (field.width(), field.height(), field.channels());
    let mut out = Field::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let sx = second_difference_stencil(x, w);
            let sy = second_difference_stencil(y, h);
            for c in 0..ch {
                let mut v = 0.0;
                if let Some([a, b, d]) = sx {
                    v += field.get(a, y, c) - 2.0 * field.get(b, y, c) + field.get(d, y, c);
                }
                if let Some([a, b, d]) = sy {
                    v += field.get(x, a, c) - 2.0 * field.get(x, b, c) + field.get(x, d, c);
                }
                out.set(x, y, c, v);
            }
        }
    }
    out
}

/// Transpose of [`laplacian`]: maps a gradient on the Laplacian back onto
/// the input field.
pub fn laplacian_adjoint(upstream: &Field) -> Field {
    let (w, h, ch) = (upstream.width(), upstream.height(), upstream.channels());
    let mut out = Field::new(w, h, ch);
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let sx = second_difference_stencil(x, w);
            let sy = second_difference_stencil(y, h);
            for c in 0..ch {
                let g = upstream.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                if let Some([a, b, d]) = sx {
                    od[(y * w + a) * ch + c] += g;
                    od[(y * w + b) * ch + c] -= 2.0 * g;
                    od[(y * w + d) * ch + c] += g;
                }
                if let Some([a, b, d]) = sy {
                    od[(a * w + x) * ch + c] += g;
                    od[(b * w + x) * ch + c] -= 2.0 * g;
                    od[(d * w + x) * ch + c] += g;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_has_no_derivatives() {
        let f = Field::filled(6, 5, 1, 3.5);
        assert!(spatial_gradient(&f).data().iter().all(|&v| v == 0.0));
        assert!(laplacian(&f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ramp() {
        let f = Field::from_fn(7, 4, |x, _| x as f64);
        let g = spatial_gradient(&f);
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(g.get(x, y, 0), 1.0);
                assert_eq!(g.get(x, y, 1), 0.0);
            }
        }
        assert!(laplacian(&f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_has_laplacian_two() {
        let f = Field::from_fn(8, 6, |x, _| (x * x) as f64);
        let l = laplacian(&f);
        assert!(l.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn adjoint_is_transpose() {
        let f = Field::from_fn(5, 4, |x, y| ((x * 3 + y * 7) % 5) as f64 - 1.3);
        let g = Field::from_fn(5, 4, |x, y| ((x * 11 + y) % 7) as f64 * 0.3);
        let lhs: f64 = laplacian(&f).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = f
            .data()
            .iter()
            .zip(laplacian_adjoint(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
