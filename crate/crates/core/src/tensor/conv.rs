//! Convolution kernels shared by `conv2d` and `conv_transpose2d`.
//!
//! Both operators relate a low-resolution index `a` to a high-resolution
//! index `b = a * stride - padding + k`. For `conv2d` the output is the
//! low-resolution side; for `conv_transpose2d` the input is. In both cases
//! the weight is laid out `[lo_channels, hi_channels, kh, kw]`, which is the
//! usual `[out, in, kh, kw]` for `conv2d` and `[in, out, kh, kw]` for the
//! transpose. Cross-correlation convention: the kernel is not flipped.

/// Spatial output size of a strided, zero-padded cross-correlation.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of the transpose of [`conv2d_output_size`].
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub lo_c: usize,
    pub lo_h: usize,
    pub lo_w: usize,
    pub hi_c: usize,
    pub hi_h: usize,
    pub hi_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Range of low-res indices `a` with `a*s - p + k` inside `[0, hi)`.
    fn valid(&self, k: usize, lo: usize, hi: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // a*s + off >= 0  and  a*s + off <= hi-1
        let start = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let end_incl = (hi as isize - 1 - off).div_euclid(s);
        let end = (end_incl + 1).clamp(0, lo as isize) as usize;
        (start as usize, end.max(start as usize))
    }

    fn lo_len(&self) -> usize {
        self.lo_h * self.lo_w
    }

    fn hi_len(&self) -> usize {
        self.hi_h * self.hi_w
    }

    fn w_index(&self, lc: usize, hc: usize, ky: usize, kx: usize) -> usize {
        ((lc * self.hi_c + hc) * self.kh + ky) * self.kw + kx
    }
}

/// `lo[a] += sum_k w[k] * hi[a*s - p + k]`
pub(crate) fn gather(g: &Geometry, hi: &[f64], weight: &[f64], lo: &mut [f64]) {
    let s = g.stride;
    for n in 0..g.batch {
        for lc in 0..g.lo_c {
            let lo_base = (n * g.lo_c + lc) * g.lo_len();
            for hc in 0..g.hi_c {
                let hi_base = (n * g.hi_c + hc) * g.hi_len();
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.lo_h, g.hi_h);
                    for kx in 0..g.kw {
                        let wv = weight[g.w_index(lc, hc, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.valid(kx, g.lo_w, g.hi_w);
                        for ay in y0..y1 {
                            let by = ay * s + ky - g.pad;
                            let lo_row = &mut lo[lo_base + ay * g.lo_w..lo_base + (ay + 1) * g.lo_w];
                            let hi_row = &hi[hi_base + by * g.hi_w..hi_base + (by + 1) * g.hi_w];
                            if s == 1 {
                                let bx0 = x0 + kx - g.pad;
                                for (l, h) in lo_row[x0..x1].iter_mut().zip(&hi_row[bx0..]) {
                                    *l += wv * h;
                                }
                            } else {
                                for ax in x0..x1 {
                                    lo_row[ax] += wv * hi_row[ax * s + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `hi[a*s - p + k] += w[k] * lo[a]`
pub(crate) fn scatter(g: &Geometry, lo: &[f64], weight: &[f64], hi: &mut [f64]) {
    let s = g.stride;
    for n in 0..g.batch {
        for lc in 0..g.lo_c {
            let lo_base = (n * g.lo_c + lc) * g.lo_len();
            for hc in 0..g.hi_c {
                let hi_base = (n * g.hi_c + hc) * g.hi_len();
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.lo_h, g.hi_h);
                    for kx in 0..g.kw {
                        let wv = weight[g.w_index(lc, hc, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.valid(kx, g.lo_w, g.hi_w);
                        for ay in y0..y1 {
                            let by = ay * s + ky - g.pad;
                            let lo_row = &lo[lo_base + ay * g.lo_w..lo_base + (ay + 1) * g.lo_w];
                            let hi_row = &mut hi[hi_base + by * g.hi_w..hi_base + (by + 1) * g.hi_w];
                            if s == 1 {
                                let bx0 = x0 + kx - g.pad;
                                for (h, l) in hi_row[bx0..].iter_mut().zip(&lo_row[x0..x1]) {
                                    *h += wv * l;
                                }
                            } else {
                                for ax in x0..x1 {
                                    hi_row[ax * s + kx - g.pad] += wv * lo_row[ax];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dw[k] += sum_a lo[a] * hi[a*s - p + k]`
pub(crate) fn weight_grad(g: &Geometry, lo: &[f64], hi: &[f64], dw: &mut [f64]) {
    let s = g.stride;
    for n in 0..g.batch {
        for lc in 0..g.lo_c {
            let lo_base = (n * g.lo_c + lc) * g.lo_len();
            for hc in 0..g.hi_c {
                let hi_base = (n * g.hi_c + hc) * g.hi_len();
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.lo_h, g.hi_h);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid(kx, g.lo_w, g.hi_w);
                        let mut acc = 0.0;
                        for ay in y0..y1 {
                            let by = ay * s + ky - g.pad;
                            let lo_row = &lo[lo_base + ay * g.lo_w..lo_base + (ay + 1) * g.lo_w];
                            let hi_row = &hi[hi_base + by * g.hi_w..hi_base + (by + 1) * g.hi_w];
                            if s == 1 {
                                let bx0 = x0 + kx - g.pad;
                                acc += lo_row[x0..x1]
                                    .iter()
                                    .zip(&hi_row[bx0..])
                                    .map(|(l, h)| l * h)
                                    .sum::<f64>();
                            } else {
                                for ax in x0..x1 {
                                    acc += lo_row[ax] * hi_row[ax * s + kx - g.pad];
                                }
                            }
                        }
                        dw[g.w_index(lc, hc, ky, kx)] += acc;
                    }
                }
            }
        }
    }
}

/// Per-channel sum of a `[batch, channels, h*w]` buffer (bias gradient).
pub(crate) fn channel_sums(data: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for n in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (n * channels + c) * plane;
            *o += data[base..base + plane].iter().sum::<f64>();
        }
    }
    out
}

pub(crate) fn add_bias(data: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let channels = bias.len();
    for n in 0..batch {
        for (c, b) in bias.iter().enumerate() {
            let base = (n * channels + c) * plane;
            for v in &mut data[base..base + plane] {
                *v += b;
            }
        }
    }
}
