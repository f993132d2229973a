//! Overlap and surface-distance metrics plus the paired signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mask::MaskImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd_mm: f64,
    pub assd_mm: f64,
}

impl MetricReport {
    pub fn compute(pred: &MaskImage, truth: &MaskImage, spacing: f64) -> Result<Self> {
        Ok(Self {
            dsc: dice(pred, truth)?,
            hd_mm: hausdorff(pred, truth, spacing)?,
            assd_mm: assd(pred, truth, spacing)?,
        })
    }
}

fn check_grid(op: &'static str, a: &MaskImage, b: &MaskImage) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

pub fn dice(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    check_grid("dice", a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&va, &vb) in a.values().iter().zip(b.values()) {
        let (pa, pb) = (va >= 0.5, vb >= 0.5);
        na += pa as usize;
        nb += pb as usize;
        inter += (pa && pb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground pixels with at least one background 8-neighbour or lying on
/// the image edge, as `(y, x)`.
pub fn boundary(mask: &MaskImage) -> Vec<(i64, i64)> {
    let (h, w) = mask.grid();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let exposed = edge
                || (y - 1..=y + 1).any(|ny| (x - 1..=x + 1).any(|nx| !mask.get(ny, nx)));
            if exposed {
                out.push((y as i64, x as i64));
            }
        }
    }
    out
}

/// Squared distance from every point of `from` to the nearest point of `to`.
fn nearest_sq(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<i64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u))
                .min()
                .unwrap_or(i64::MAX)
        })
        .collect()
}

fn surfaces(op: &'static str, a: &MaskImage, b: &MaskImage, spacing: f64) -> Result<(Vec<i64>, Vec<i64>)> {
    check_grid(op, a, b)?;
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::invalid("spacing must be > 0"));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::Empty { op });
    }
    Ok((nearest_sq(&ba, &bb), nearest_sq(&bb, &ba)))
}

/// Symmetric Hausdorff distance between the mask boundaries, in mm.
pub fn hausdorff(a: &MaskImage, b: &MaskImage, spacing: f64) -> Result<f64> {
    let (ab, ba) = surfaces("hausdorff", a, b, spacing)?;
    let worst = ab.iter().chain(&ba).copied().max().unwrap_or(0);
    Ok((worst as f64).sqrt() * spacing)
}

/// Average symmetric surface distance, in mm.
pub fn assd(a: &MaskImage, b: &MaskImage, spacing: f64) -> Result<f64> {
    let (ab, ba) = surfaces("assd", a, b, spacing)?;
    let total: f64 = ab.iter().chain(&ba).map(|&d| (d as f64).sqrt()).sum();
    Ok(total / (ab.len() + ba.len()) as f64 * spacing)
}

/// Two-sided p-value of the Wilcoxon signed-rank test on paired samples,
/// normal approximation with tie correction. Zero differences are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "wilcoxon" });
    }
    let n = d.len();
    if n < 6 {
        return Err(Error::InsufficientData(format!(
            "wilcoxon needs >= 6 non-zero differences, got {n}"
        )));
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        w_plus += d[i..=j].iter().filter(|v| **v > 0.0).count() as f64 * rank;
        i = j + 1;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus - mean) / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `mean(std)` with three decimals.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.3}({s:.3})")
}
