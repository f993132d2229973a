//! Dense displacement fields with the warp and composition operators.
//!
//! Convention: a flow on the target grid holds, at every pixel `x`, the
//! displacement to add to `x` to find the sample location in the source.
//! Warping is therefore `out(x) = source(x + F(x))` and composition chains
//! point correspondences: `(F_ij ⊕ F_jk)(x) = F_ij(x + F_jk(x)) + F_jk(x)`.

use crate::error::{Error, Result};
use crate::tensor::ops::{warp_forward, Sample};
use crate::tensor::Tensor;

/// Per-pixel displacement `(u, v)` in pixels, stored as a `[2, H, W]`
/// tensor with channel order `(u, v)`; `u` moves along columns (x) and `v`
/// along rows (y).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

/// Output of [`warp`].
#[derive(Clone, Debug)]
pub struct WarpResult {
    pub warped: Tensor,
    /// Fraction of samples whose location fell outside the image and was
    /// clamped to the border.
    pub oob_fraction: f64,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        let plane = height * width;
        Self {
            data: Tensor::from_fn(&[2, height, width], |i| if i < plane { u } else { v }),
        }
    }

    /// Builds a flow by evaluating `f(y, x) -> (u, v)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 2 * plane];
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                data[y * width + x] = u;
                data[plane + y * width + x] = v;
            }
        }
        Self {
            data: Tensor::new(vec![2, height, width], data).expect("shape matches data"),
        }
    }

    /// Wraps a `[2, H, W]` (or `[1, 2, H, W]`) tensor.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let t = if t.ndim() == 4 && t.shape()[0] == 1 {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)?
        } else {
            t
        };
        if t.ndim() != 3 || t.shape()[0] != 2 {
            return Err(Error::InvalidShape {
                op: "flow",
                detail: format!("expected [2, H, W], got {:?}", t.shape()),
            });
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "flow" });
        }
        Ok(Self { data: t })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// The flow as a `[1, 2, H, W]` batch for graph operations.
    pub fn to_batch(&self) -> Tensor {
        self.data
            .clone()
            .reshape(&[1, 2, self.height(), self.width()])
            .expect("same element count")
    }

    pub fn u(&self) -> &[f64] {
        &self.data.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f64] {
        &self.data.data()[self.height() * self.width()..]
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let p = y * self.width() + x;
        (self.u()[p], self.v()[p])
    }

    /// Bilinearly interpolated displacement at a continuous location.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = self.grid();
        let s = Sample::at(x, y, h, w);
        (s.interpolate(self.u(), w), s.interpolate(self.v(), w))
    }

    /// Mean displacement magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u().len() as f64;
        self.u()
            .iter()
            .zip(self.v())
            .map(|(u, v)| u.hypot(*v))
            .sum::<f64>()
            / n
    }

    /// Per-pixel endpoint error against `other`.
    pub fn endpoint_errors(&self, other: &FlowField) -> Result<Vec<f64>> {
        check_grid("endpoint_errors", self.grid(), other.grid())?;
        Ok(self
            .u()
            .iter()
            .zip(self.v())
            .zip(other.u().iter().zip(other.v()))
            .map(|((a, b), (c, d))| (a - c).hypot(b - d))
            .collect())
    }

    pub fn add(&self, other: &FlowField) -> Result<FlowField> {
        check_grid("flow add", self.grid(), other.grid())?;
        Ok(Self {
            data: self.data.zip_map(&other.data, |a, b| a + b)?,
        })
    }

    /// Resamples the field to a new grid, rescaling displacements by the
    /// grid ratio (pixel-centre alignment).
    pub fn resize(&self, height: usize, width: usize) -> FlowField {
        let (h, w) = self.grid();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        FlowField::from_fn(height, width, |y, x| {
            let cy = (y as f64 + 0.5) * sy - 0.5;
            let cx = (x as f64 + 0.5) * sx - 0.5;
            let (u, v) = self.sample(cx, cy);
            (u / sx, v / sy)
        })
    }
}

fn check_grid(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        });
    }
    Ok(())
}

/// Backward-warps an `[H, W]` or `[C, H, W]` tensor by `flow`.
pub fn warp(source: &Tensor, flow: &FlowField) -> Result<WarpResult> {
    if source.ndim() < 2 || source.ndim() > 3 {
        return Err(Error::InvalidShape {
            op: "warp",
            detail: format!("expected [H, W] or [C, H, W], got {:?}", source.shape()),
        });
    }
    check_grid("warp", source.hw(), flow.grid())?;
    if !source.all_finite() {
        return Err(Error::NonFinite { op: "warp source" });
    }
    let (h, w) = flow.grid();
    let channels = source.len() / (h * w);
    let (out, oob) = warp_forward(source.data(), flow.as_tensor().data(), 1, channels, h, w);
    Ok(WarpResult {
        warped: Tensor::new(source.shape().to_vec(), out)?,
        oob_fraction: oob as f64 / (h * w) as f64,
    })
}

/// `F_ik = F_ij ⊗ F_jk + F_jk`: the flow from frame i to frame k given the
/// flows i→j and j→k.
pub fn compose(f_ij: &FlowField, f_jk: &FlowField) -> Result<FlowField> {
    check_grid("compose", f_ij.grid(), f_jk.grid())?;
    let warped = warp(f_ij.as_tensor(), f_jk)?.warped;
    FlowField::from_tensor(warped)?.add(f_jk)
}

/// Builds the composite flows `F̂_1n` for `n = 2..=N` from the consecutive
/// flows `F_(n-1)n`: `F̂_12 = F_12`, `F̂_1n = F̂_1(n-1) ⊕ F_(n-1)n`.
pub fn composite_sequence(pairwise: &[FlowField]) -> Result<Vec<FlowField>> {
    let (first, rest) = pairwise
        .split_first()
        .ok_or(Error::Empty { op: "composite_sequence" })?;
    let mut out = Vec::with_capacity(pairwise.len());
    out.push(first.clone());
    for f in rest {
        let next = compose(out.last().expect("non-empty"), f)?;
        out.push(next);
    }
    Ok(out)
}

/// `F̂*_1n = F̂_1n ⊕ F^δ_n`, where the correction was estimated between the
/// composite-warped first frame and frame n.
pub fn drift_compensate(composite: &FlowField, correction: &FlowField) -> Result<FlowField> {
    compose(composite, correction)
}

/// Separable Gaussian blur over the two trailing axes, clamping at the
/// border. `sigma <= 0` returns a copy.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    if !(sigma > 0.0) {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = image.hw();
    let planes = image.len() / (h * w);
    let mut out = image.clone();
    let mut tmp = vec![0.0; h * w];
    for p in 0..planes {
        let plane = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
    out
}

/// 2x2 average pooling of an `[H, W]` image; odd trailing rows/columns are
/// averaged over the pixels available.
pub fn downsample2(image: &Tensor) -> Tensor {
    let (h, w) = image.hw();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let d = image.data();
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in 2 * y..(2 * y + 2).min(h) {
                for xx in 2 * x..(2 * x + 2).min(w) {
                    acc += d[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * ow + x] = acc / n;
        }
    }
    Tensor::new(vec![oh, ow], out).expect("pooled shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| (i % w) as f64)
    }

    #[test]
    fn zero_flow_is_bit_exact_identity() {
        let img = Tensor::from_fn(&[7, 9], |i| ((i * 31) % 17) as f64 * 0.123 - 1.0);
        let r = warp(&img, &FlowField::zeros(7, 9)).unwrap();
        assert_eq!(r.warped, img);
        assert_eq!(r.oob_fraction, 0.0);
    }

    #[test]
    fn unit_shift_takes_next_column() {
        let img = ramp(5, 8);
        let r = warp(&img, &FlowField::constant(5, 8, 1.0, 0.0)).unwrap();
        for y in 0..5 {
            for c in 0..7 {
                assert_eq!(r.warped.data()[y * 8 + c], (c + 1) as f64);
            }
        }
        // last column clamps
        assert!((r.oob_fraction - 5.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let img = ramp(5, 8);
        assert!(warp(&img, &FlowField::zeros(5, 7)).is_err());
        assert!(compose(&FlowField::zeros(5, 8), &FlowField::zeros(4, 8)).is_err());
    }

    #[test]
    fn compose_identities() {
        let f = FlowField::from_fn(12, 12, |y, x| ((x as f64 * 0.3).sin(), (y as f64 * 0.2).cos()));
        let z = FlowField::zeros(12, 12);
        assert_eq!(compose(&f, &z).unwrap(), f);
        assert_eq!(compose(&z, &f).unwrap(), f);
    }

    #[test]
    fn constant_translations_add() {
        let a = FlowField::constant(10, 10, 2.0, 0.0);
        let b = FlowField::constant(10, 10, 3.0, 0.0);
        let c = compose(&a, &b).unwrap();
        for y in 0..10 {
            for x in 0..5 {
                assert_eq!(c.at(y, x), (5.0, 0.0));
            }
        }
    }

    #[test]
    fn composite_sequence_cases() {
        let f = FlowField::constant(6, 6, 0.5, -0.25);
        assert_eq!(composite_sequence(std::slice::from_ref(&f)).unwrap(), vec![f]);
        assert!(composite_sequence(&[]).is_err());
        let zeros = vec![FlowField::zeros(6, 6); 4];
        for c in composite_sequence(&zeros).unwrap() {
            assert_eq!(c.as_tensor().max_abs(), 0.0);
        }
        let steps: Vec<_> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&u| FlowField::constant(20, 20, u, 0.0))
            .collect();
        let comp = composite_sequence(&steps).unwrap();
        for (c, expect) in comp.iter().zip([1.0, 3.0, 6.0]) {
            assert_eq!(c.at(10, 5), (expect, 0.0));
        }
    }

    #[test]
    fn drift_compensation_recovers_constant_offset() {
        let truth = FlowField::constant(16, 16, 3.0, 1.0);
        let composite = FlowField::constant(16, 16, 2.0, 1.0);
        let correction = FlowField::constant(16, 16, 1.0, 0.0);
        let fixed = drift_compensate(&composite, &correction).unwrap();
        for y in 2..12 {
            for x in 2..12 {
                assert_eq!(fixed.at(y, x), truth.at(y, x));
            }
        }
        assert_eq!(
            drift_compensate(&composite, &FlowField::zeros(16, 16)).unwrap(),
            composite
        );
    }

    #[test]
    fn resize_scales_displacements() {
        let f = FlowField::constant(8, 8, 1.0, -0.5);
        let g = f.resize(16, 16);
        assert_eq!(g.grid(), (16, 16));
        assert!((g.at(5, 5).0 - 2.0).abs() < 1e-12);
        assert!((g.at(5, 5).1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Tensor::from_fn(&[4, 4], |i| i as f64);
        let d = downsample2(&img);
        assert_eq!(d.shape(), &[2, 2]);
        assert_eq!(d.data()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let odd = downsample2(&Tensor::from_fn(&[3, 3], |i| i as f64));
        assert_eq!(odd.shape(), &[2, 2]);
        assert_eq!(odd.data()[3], 8.0);
    }
}
