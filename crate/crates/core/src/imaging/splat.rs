use super::Field;

/// Accumulated bilinear deposit weight on the target grid when every source
/// pixel `p_s` is pushed to `p_s + flow(p_s)`.
///
/// Corners that fall outside the grid are dropped. Accumulation runs in a
/// fixed row-major order, so the result does not depend on any tiling.
pub fn forward_splat_weights(flow_s_to_t: &Field) -> Field {
    let (w, h) = (flow_s_to_t.width(), flow_s_to_t.height());
    let mut out = Field::new(w, h, 1);
    let acc = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 + flow_s_to_t.get(x, y, 0);
            let v = y as f64 + flow_s_to_t.get(x, y, 1);
            if !u.is_finite() || !v.is_finite() {
                continue;
            }
            let (fu, fv) = (u.floor(), v.floor());
            let (ax, ay) = (u - fu, v - fv);
            let corners = [
                (fu, fv, (1.0 - ax) * (1.0 - ay)),
                (fu + 1.0, fv, ax * (1.0 - ay)),
                (fu, fv + 1.0, (1.0 - ax) * ay),
                (fu + 1.0, fv + 1.0, ax * ay),
            ];
            for (cx, cy, wt) in corners {
                if wt == 0.0 {
                    continue;
                }
                if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
                    acc[cy as usize * w + cx as usize] += wt;
                }
            }
        }
    }
    out
}
