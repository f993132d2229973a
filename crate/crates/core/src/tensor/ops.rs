//! Raw numeric kernels behind the non-trivial graph operations.

/// Bilinear sample location after clamping to the image border.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Sample {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Coordinate was clamped; the sample does not move with the flow.
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl Sample {
    #[inline]
    pub fn at(sx: f64, sy: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, clamped_x) = axis(sx, w);
        let (y0, y1, fy, clamped_y) = axis(sy, h);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            clamped_x,
            clamped_y,
        }
    }

    #[inline]
    pub fn oob(&self) -> bool {
        self.clamped_x || self.clamped_y
    }

    #[inline]
    pub fn interpolate(&self, plane: &[f64], w: usize) -> f64 {
        let s00 = plane[self.y0 * w + self.x0];
        let s01 = plane[self.y0 * w + self.x1];
        let s10 = plane[self.y1 * w + self.x0];
        let s11 = plane[self.y1 * w + self.x1];
        let top = (1.0 - self.fx) * s00 + self.fx * s01;
        let bottom = (1.0 - self.fx) * s10 + self.fx * s11;
        (1.0 - self.fy) * top + self.fy * bottom
    }
}

#[inline]
fn axis(s: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let (c, clamped) = if s < 0.0 {
        (0.0, true)
    } else if s > max {
        (max, true)
    } else {
        (s, false)
    };
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, clamped)
}

/// Backward warp: `out[n,c,y,x] = bilinear(src[n,c], x + u, y + v)` with
/// border clamping. Returns the output and the count of clamped samples.
pub(crate) fn warp_forward(
    src: &[f64],
    flow: &[f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, usize) {
    let plane = h * w;
    let mut out = vec![0.0; batch * channels * plane];
    let mut oob = 0;
    for n in 0..batch {
        let u = &flow[(n * 2) * plane..(n * 2 + 1) * plane];
        let v = &flow[(n * 2 + 1) * plane..(n * 2 + 2) * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = Sample::at(x as f64 + u[p], y as f64 + v[p], h, w);
                if s.oob() {
                    oob += 1;
                }
                for c in 0..channels {
                    let base = (n * channels + c) * plane;
                    out[base + p] = s.interpolate(&src[base..base + plane], w);
                }
            }
        }
    }
    (out, oob)
}

/// Gradients of [`warp_forward`] with respect to source and flow.
pub(crate) fn warp_backward(
    src: &[f64],
    flow: &[f64],
    grad_out: &[f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut g_src = vec![0.0; src.len()];
    let mut g_flow = vec![0.0; flow.len()];
    for n in 0..batch {
        let ub = (n * 2) * plane;
        let vb = (n * 2 + 1) * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = Sample::at(x as f64 + flow[ub + p], y as f64 + flow[vb + p], h, w);
                let (i00, i01) = (s.y0 * w + s.x0, s.y0 * w + s.x1);
                let (i10, i11) = (s.y1 * w + s.x0, s.y1 * w + s.x1);
                let mut du = 0.0;
                let mut dv = 0.0;
                for c in 0..channels {
                    let base = (n * channels + c) * plane;
                    let g = grad_out[base + p];
                    if g == 0.0 {
                        continue;
                    }
                    let sp = &src[base..base + plane];
                    let gs = &mut g_src[base..base + plane];
                    gs[i00] += g * (1.0 - s.fx) * (1.0 - s.fy);
                    gs[i01] += g * s.fx * (1.0 - s.fy);
                    gs[i10] += g * (1.0 - s.fx) * s.fy;
                    gs[i11] += g * s.fx * s.fy;
                    if !s.clamped_x {
                        du += g * ((1.0 - s.fy) * (sp[i01] - sp[i00]) + s.fy * (sp[i11] - sp[i10]));
                    }
                    if !s.clamped_y {
                        dv += g * ((1.0 - s.fx) * (sp[i10] - sp[i00]) + s.fx * (sp[i11] - sp[i01]));
                    }
                }
                g_flow[ub + p] += du;
                g_flow[vb + p] += dv;
            }
        }
    }
    (g_src, g_flow)
}

/// Forward difference along the last (`axis = 0`, x) or second-to-last
/// (`axis = 1`, y) dimension. `dims` is `(outer, h, w)`.
pub(crate) fn spatial_diff(data: &[f64], outer: usize, h: usize, w: usize, axis: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(if axis == 0 { outer * h * (w - 1) } else { outer * (h - 1) * w });
    for o in 0..outer {
        let p = &data[o * h * w..(o + 1) * h * w];
        if axis == 0 {
            for y in 0..h {
                for x in 0..w - 1 {
                    out.push(p[y * w + x + 1] - p[y * w + x]);
                }
            }
        } else {
            for y in 0..h - 1 {
                for x in 0..w {
                    out.push(p[(y + 1) * w + x] - p[y * w + x]);
                }
            }
        }
    }
    out
}

pub(crate) fn spatial_diff_backward(
    grad: &[f64],
    outer: usize,
    h: usize,
    w: usize,
    axis: usize,
) -> Vec<f64> {
    let mut g_in = vec![0.0; outer * h * w];
    let mut k = 0;
    for o in 0..outer {
        let gi = &mut g_in[o * h * w..(o + 1) * h * w];
        if axis == 0 {
            for y in 0..h {
                for x in 0..w - 1 {
                    gi[y * w + x + 1] += grad[k];
                    gi[y * w + x] -= grad[k];
                    k += 1;
                }
            }
        } else {
            for y in 0..h - 1 {
                for x in 0..w {
                    gi[(y + 1) * w + x] += grad[k];
                    gi[y * w + x] -= grad[k];
                    k += 1;
                }
            }
        }
    }
    g_in
}

/// Nearest-neighbour 2x upsampling of `[outer, h, w]` planes.
pub(crate) fn upsample2x(data: &[f64], outer: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; outer * h2 * w2];
    for o in 0..outer {
        for y in 0..h2 {
            for x in 0..w2 {
                out[o * h2 * w2 + y * w2 + x] = data[o * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(grad: &[f64], outer: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut g = vec![0.0; outer * h * w];
    for o in 0..outer {
        for y in 0..h2 {
            for x in 0..w2 {
                g[o * h * w + (y / 2) * w + x / 2] += grad[o * h2 * w2 + y * w2 + x];
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_axis_reports_oob() {
        let (i0, i1, f, c) = axis(-0.5, 4);
        assert_eq!((i0, i1, f, c), (0, 1, 0.0, true));
        let (i0, i1, f, c) = axis(3.0, 4);
        assert_eq!((i0, i1, f, c), (3, 3, 0.0, false));
        let (_, _, f, c) = axis(1.25, 4);
        assert_eq!((f, c), (0.25, false));
    }

    #[test]
    fn diff_backward_is_adjoint() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let gy: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        for axis in 0..2 {
            let d = spatial_diff(&data, 1, 3, 4, axis);
            let gy = &gy[..d.len()];
            let lhs: f64 = d.iter().zip(gy).map(|(a, b)| a * b).sum();
            let gx = spatial_diff_backward(gy, 1, 3, 4, axis);
            let rhs: f64 = data.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
