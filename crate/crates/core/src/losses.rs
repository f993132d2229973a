//! Training objectives for motion estimation and the shape prior.
//!
//! All image-like arguments are graph variables of shape `[1, C, H, W]`;
//! flows are `[1, 2, H, W]`. Every reduction is a mean, so the weights keep
//! their meaning across resolutions.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Unary, Var};

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_anat: f64,
    pub lambda_recon: f64,
    /// Huber transition point, in pixels.
    pub huber_delta: f64,
}

impl LossWeights {
    /// Unsupervised baseline: `lambda_h = 0.02`, no anatomy terms.
    pub fn baseline() -> Self {
        Self {
            lambda_h: 0.02,
            lambda_anat: 0.0,
            lambda_recon: 0.0,
            huber_delta: 1.0,
        }
    }

    /// Anatomy-aware refinement: `(0.04, 6.0, 1.2)`.
    pub fn aatracker() -> Self {
        Self {
            lambda_h: 0.04,
            lambda_anat: 6.0,
            lambda_recon: 1.2,
            huber_delta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_h, self.lambda_anat, self.lambda_recon];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::invalid("huber_delta must be > 0"));
        }
        Ok(())
    }

    pub fn uses_anatomy(&self) -> bool {
        self.lambda_anat > 0.0 || self.lambda_recon > 0.0
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Penalty applied to image residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageNorm {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error, for sensitivity studies.
    L2,
}

/// Optional restriction of image/mask residuals to a weighted region
/// (e.g. the interior away from clamped borders).
#[derive(Clone, Debug, Default)]
pub struct Region {
    weights: Option<Tensor>,
}

impl Region {
    pub fn everywhere() -> Self {
        Self { weights: None }
    }

    /// Region given by an `[H, W]` weight map (typically 0/1).
    pub fn weighted(weights: Tensor) -> Result<Self> {
        if weights.ndim() != 2 || weights.sum() <= 0.0 {
            return Err(Error::invalid("region weights must be [H, W] with positive total"));
        }
        Ok(Self {
            weights: Some(weights),
        })
    }

    /// Pixels at least `margin` away from every border.
    pub fn interior(height: usize, width: usize, margin: usize) -> Result<Self> {
        Self::weighted(Tensor::from_fn(&[height, width], |i| {
            let (y, x) = (i / width, i % width);
            let inside = y >= margin && x >= margin && y + margin < height && x + margin < width;
            inside as u8 as f64
        }))
    }
}

/// Mean of `norm(a - b)` over the region.
fn residual(g: &mut Graph, a: Var, b: Var, norm: ImageNorm, region: &Region) -> Result<Var> {
    let d = g.sub(a, b)?;
    let r = match norm {
        ImageNorm::L1 => g.abs(d)?,
        ImageNorm::L2 => g.unary(Unary::Square, d)?,
    };
    match &region.weights {
        None => g.mean(r),
        Some(w) => {
            let shape = g.shape(r).to_vec();
            let (h, wd) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            if w.shape() != [h, wd] {
                return Err(Error::ShapeMismatch {
                    op: "region",
                    left: w.shape().to_vec(),
                    right: shape,
                });
            }
            let per_plane = g.value(r).len() / (h * wd);
            let tiled = Tensor::from_fn(&shape, |i| w.data()[i % (h * wd)]);
            let total = w.sum() * per_plane as f64;
            let wv = g.constant(tiled)?;
            let weighted = g.mul(r, wv)?;
            let s = g.sum(weighted)?;
            g.scale(s, 1.0 / total)
        }
    }
}

/// `L_cons = ‖I1 − warp(I2, F21)‖ + ‖I2 − warp(I1, F12)‖`.
pub fn consistency_loss(
    g: &mut Graph,
    i1: Var,
    i2: Var,
    f12: Var,
    f21: Var,
    norm: ImageNorm,
    region: &Region,
) -> Result<Var> {
    let i1w = g.warp(i1, f12)?;
    let i2w = g.warp(i2, f21)?;
    let a = residual(g, i1, i2w, norm, region)?;
    let b = residual(g, i2, i1w, norm, region)?;
    g.add(a, b)
}

/// Huber penalty on the forward spatial differences of both flow
/// components: the sum of the x- and y-difference penalties divided by the
/// number of flow values `2 H W`.
pub fn huber_smoothness(g: &mut Graph, flow: Var, delta: f64) -> Result<Var> {
    if !(delta > 0.0) {
        return Err(Error::invalid("huber delta must be > 0"));
    }
    let n = g.value(flow).len() as f64;
    let (h, w) = g.value(flow).hw();
    let mut sums = Vec::with_capacity(2);
    for (axis, extent) in [(0, w), (1, h)] {
        if extent < 2 {
            continue;
        }
        let d = g.spatial_diff(flow, axis)?;
        let hd = g.unary(Unary::Huber(delta), d)?;
        sums.push(g.sum(hd)?);
    }
    if sums.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0))?;
        return g.mul(zero, flow).and_then(|z| g.sum(z));
    }
    let s = g.add_all(&sums)?;
    g.scale(s, 1.0 / n)
}

/// Per-term values of an objective evaluation, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub total: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub anatomy: f64,
    pub reconstruction: f64,
}

/// Graph handle of an objective plus the values of its terms.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub loss: Var,
    pub terms: TermValues,
}

/// `L_base = L_cons + λ_H (H(F12) + H(F21))`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_objective(
    g: &mut Graph,
    i1: Var,
    i2: Var,
    f12: Var,
    f21: Var,
    weights: &LossWeights,
    norm: ImageNorm,
    region: &Region,
) -> Result<Objective> {
    weights.validate()?;
    let cons = consistency_loss(g, i1, i2, f12, f21, norm, region)?;
    let h12 = huber_smoothness(g, f12, weights.huber_delta)?;
    let h21 = huber_smoothness(g, f21, weights.huber_delta)?;
    let smooth = g.add(h12, h21)?;
    let weighted = g.scale(smooth, weights.lambda_h)?;
    let loss = g.add(cons, weighted)?;
    let terms = TermValues {
        total: g.value(loss).item(),
        consistency: g.value(cons).item(),
        smoothness: g.value(smooth).item(),
        ..Default::default()
    };
    Ok(Objective { loss, terms })
}

fn check_unit_interval(g: &Graph, m: Var, what: &str) -> Result<()> {
    if g.value(m).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("{what} has values outside [0, 1]")));
    }
    Ok(())
}

/// `L_anat = |M1 − warp(M2, F21)| + |M2 − warp(M1, F12)|`.
pub fn anatomy_loss(
    g: &mut Graph,
    m1: Var,
    m2: Var,
    f12: Var,
    f21: Var,
    region: &Region,
) -> Result<Var> {
    check_unit_interval(g, m1, "m1")?;
    check_unit_interval(g, m2, "m2")?;
    let m1w = g.warp(m1, f12)?;
    let m2w = g.warp(m2, f21)?;
    let a = residual(g, m1, m2w, ImageNorm::L1, region)?;
    let b = residual(g, m2, m1w, ImageNorm::L1, region)?;
    g.add(a, b)
}

/// `L_recon = |M1' − M1_recon| + |M2' − M2_recon|`.
pub fn vae_consistency_loss(
    g: &mut Graph,
    m1_warped: Var,
    m2_warped: Var,
    m1_recon: Var,
    m2_recon: Var,
) -> Result<Var> {
    let all = Region::everywhere();
    let a = residual(g, m1_warped, m1_recon, ImageNorm::L1, &all)?;
    let b = residual(g, m2_warped, m2_recon, ImageNorm::L1, &all)?;
    g.add(a, b)
}

/// Graph inputs of the anatomy-aware objective.
#[derive(Clone, Copy, Debug)]
pub struct AnatomyInputs {
    pub m1: Var,
    pub m2: Var,
    /// Shape-prior reconstructions of `warp(M1, F12)` and `warp(M2, F21)`,
    /// recorded as constants.
    pub m1_recon: Var,
    pub m2_recon: Var,
}

/// `L = L_cons + λ_H L_H + λ_anat L_anat + λ_recon L_recon`.
#[allow(clippy::too_many_arguments)]
pub fn aatracker_objective(
    g: &mut Graph,
    i1: Var,
    i2: Var,
    f12: Var,
    f21: Var,
    anatomy: &AnatomyInputs,
    weights: &LossWeights,
    norm: ImageNorm,
    region: &Region,
) -> Result<Objective> {
    let base = baseline_objective(g, i1, i2, f12, f21, weights, norm, region)?;
    let anat = anatomy_loss(g, anatomy.m1, anatomy.m2, f12, f21, region)?;
    let m1w = g.warp(anatomy.m1, f12)?;
    let m2w = g.warp(anatomy.m2, f21)?;
    let recon = vae_consistency_loss(g, m1w, m2w, anatomy.m1_recon, anatomy.m2_recon)?;
    let wa = g.scale(anat, weights.lambda_anat)?;
    let wr = g.scale(recon, weights.lambda_recon)?;
    let loss = g.add_all(&[base.loss, wa, wr])?;
    let terms = TermValues {
        total: g.value(loss).item(),
        anatomy: g.value(anat).item(),
        reconstruction: g.value(recon).item(),
        ..base.terms
    };
    Ok(Objective { loss, terms })
}

/// `-0.5 Σ (1 + logvar − mu² − exp(logvar))`, summed over latent dimensions
/// and averaged over the batch (first axis).
pub fn kld_loss(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let (ms, ls) = (g.shape(mu).to_vec(), g.shape(logvar).to_vec());
    if ms != ls {
        return Err(Error::ShapeMismatch {
            op: "kld",
            left: ms,
            right: ls,
        });
    }
    let batch = if ms.len() > 1 { ms[0] } else { 1 };
    let mu2 = g.unary(Unary::Square, mu)?;
    let ev = g.unary(Unary::Exp, logvar)?;
    let a = g.unary(Unary::Offset(1.0), logvar)?;
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, ev)?;
    let s = g.sum(c)?;
    g.scale(s, -0.5 / batch as f64)
}
