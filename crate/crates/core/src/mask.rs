//! Segmentation masks: soft `[0, 1]` images during optimization, binary
//! `{0, 1}` images for evaluation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold used wherever a soft mask is binarized.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    data: Tensor,
    binary: bool,
}

impl MaskImage {
    /// Wraps an `[H, W]` tensor whose values lie in `[0, 1]`.
    pub fn soft(data: Tensor) -> Result<Self> {
        if data.ndim() != 2 {
            return Err(Error::InvalidShape {
                op: "mask",
                detail: format!("expected [H, W], got {:?}", data.shape()),
            });
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        let binary = data.data().iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self { data, binary })
    }

    /// Soft mask from values clamped into `[0, 1]`.
    pub fn soft_clamped(data: Tensor) -> Result<Self> {
        Self::soft(data.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = Tensor::from_fn(&[height, width], |i| f(i / width, i % width) as u8 as f64);
        Self { data, binary: true }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    /// Binarized copy: `1` where the value is at least [`BINARY_THRESHOLD`].
    pub fn threshold(&self) -> MaskImage {
        if self.binary {
            return self.clone();
        }
        Self {
            data: self.data.map(|v| (v >= BINARY_THRESHOLD) as u8 as f64),
            binary: true,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data.data()[y * self.width() + x] >= BINARY_THRESHOLD
    }

    /// Foreground pixel count after thresholding.
    pub fn count(&self) -> usize {
        self.data
            .data()
            .iter()
            .filter(|&&v| v >= BINARY_THRESHOLD)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Binary mask shifted by `(dy, dx)` pixels; vacated pixels are background.
    pub fn translate(&self, dy: isize, dx: isize) -> MaskImage {
        let (h, w) = self.grid();
        let b = self.threshold();
        MaskImage::from_fn(h, w, |y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && b.get(sy as usize, sx as usize)
        })
    }

    pub fn flip_horizontal(&self) -> MaskImage {
        let (h, w) = self.grid();
        let d = self.data.data();
        let t = Tensor::from_fn(&[h, w], |i| d[(i / w) * w + (w - 1 - i % w)]);
        Self {
            data: t,
            binary: self.binary,
        }
    }

    pub fn flip_vertical(&self) -> MaskImage {
        let (h, w) = self.grid();
        let d = self.data.data();
        let t = Tensor::from_fn(&[h, w], |i| d[(h - 1 - i / w) * w + i % w]);
        Self {
            data: t,
            binary: self.binary,
        }
    }

    /// Labels of the 8-connected foreground components (0 = background).
    pub fn components(&self) -> (Vec<usize>, usize) {
        let (h, w) = self.grid();
        let mut labels = vec![0usize; h * w];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if labels[start] != 0 || !self.get(start / w, start % w) {
                continue;
            }
            next += 1;
            labels[start] = next;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if labels[q] == 0 && self.get(ny as usize, nx as usize) {
                            labels[q] = next;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        (labels, next)
    }

    pub fn component_count(&self) -> usize {
        self.components().1
    }

    /// Keeps only the largest 8-connected component.
    pub fn largest_component(&self) -> MaskImage {
        let (labels, n) = self.components();
        if n <= 1 {
            return self.threshold();
        }
        let mut sizes = vec![0usize; n + 1];
        for &l in &labels {
            sizes[l] += 1;
        }
        let best = (1..=n).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap_or(1);
        let (h, w) = self.grid();
        MaskImage::from_fn(h, w, |y, x| labels[y * w + x] == best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_rejected() {
        assert!(MaskImage::soft(Tensor::full(&[2, 2], 1.5)).is_err());
        assert!(MaskImage::soft(Tensor::full(&[2, 2], 0.5)).is_ok());
    }

    #[test]
    fn threshold_is_binary() {
        let m = MaskImage::soft(Tensor::from_fn(&[2, 2], |i| i as f64 / 3.0)).unwrap();
        assert!(!m.is_binary());
        let b = m.threshold();
        assert!(b.is_binary());
        assert_eq!(b.values(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn components_use_8_connectivity() {
        let m = MaskImage::from_fn(5, 5, |y, x| (y == x) || (y == 0 && x == 4));
        assert_eq!(m.component_count(), 2);
        assert_eq!(m.largest_component().count(), 5);
    }

    #[test]
    fn translate_moves_pixels() {
        let m = MaskImage::from_fn(4, 4, |y, x| y == 1 && x == 1);
        let t = m.translate(1, 2);
        assert!(t.get(2, 3));
        assert_eq!(t.count(), 1);
    }
}
