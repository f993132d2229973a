//! Per-pair dense-field solver on an average-pooling pyramid.

use crate::error::{Error, Result};
use crate::flow::{downsample2, gaussian_blur, warp, FlowField};
use crate::losses::{aatracker_objective, baseline_objective, AnatomyInputs, LossWeights, Region, TermValues};
use crate::nn::Adam;
use crate::tensor::{Graph, Tensor};

use super::{check_anatomy, check_pair, diverged, window_converged, Anatomy, EstimatorConfig, MotionPair};

/// Coarsest pyramid level kept, in pixels per side.
const MIN_LEVEL_SIZE: usize = 8;
const CONVERGENCE_WINDOW: usize = 50;

#[derive(Clone, Debug)]
pub struct DirectOptions {
    /// Starting flows `(F12, F21)` at the input resolution. When given, the
    /// pyramid is skipped and only the finest level is optimized.
    pub init: Option<(FlowField, FlowField)>,
    /// Recompute the prior reconstructions every this many iterations.
    pub recon_every: usize,
    /// Residuals ignore pixels closer than this to the border.
    pub margin: usize,
    /// Width (pixels at each level) of the Gaussian applied to flow
    /// gradients before the update; 0 disables preconditioning.
    pub grad_sigma: f64,
    /// Masks and their prior reconstructions are compared after a Gaussian
    /// of this width; 0 compares the binary masks directly.
    pub mask_sigma: f64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            init: None,
            recon_every: 1,
            margin: 0,
            grad_sigma: 3.0,
            mask_sigma: 2.0,
        }
    }
}

fn pyramid(image: &Tensor, levels: usize) -> Vec<Tensor> {
    let mut out = vec![image.clone()];
    while out.len() < levels {
        let (h, w) = out.last().expect("non-empty").hw();
        if h / 2 < MIN_LEVEL_SIZE || w / 2 < MIN_LEVEL_SIZE {
            break;
        }
        let next = downsample2(out.last().expect("non-empty"));
        out.push(next);
    }
    out.reverse();
    out
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    let (h, w) = image.hw();
    image.clone().reshape(&[1, 1, h, w])
}

/// Solves for `(F12, F21)` coarse-to-fine. Anatomy terms, when requested,
/// apply at the input resolution only; coarser levels use the baseline
/// objective with the same smoothness weight.
pub fn estimate_direct(
    i1: &Tensor,
    i2: &Tensor,
    config: &EstimatorConfig,
    anatomy: Option<&Anatomy<'_>>,
    options: &DirectOptions,
) -> Result<MotionPair> {
    config.validate()?;
    let grid = check_pair(i1, i2)?;
    if let Some(a) = anatomy {
        check_anatomy(a, grid)?;
    } else if config.weights.uses_anatomy() {
        return Err(Error::invalid("anatomy weights are non-zero but no masks were supplied"));
    }
    if options.recon_every == 0 {
        return Err(Error::invalid("recon_every must be >= 1"));
    }
    let (p1, p2) = if options.init.is_some() {
        (vec![i1.clone()], vec![i2.clone()])
    } else {
        (pyramid(i1, config.levels), pyramid(i2, config.levels))
    };
    let (h0, w0) = p1[0].hw();
    let (mut f12, mut f21) = match &options.init {
        Some((a, b)) => {
            if a.grid() != grid || b.grid() != grid {
                return Err(Error::ShapeMismatch {
                    op: "initial flow",
                    left: vec![grid.0, grid.1],
                    right: vec![a.height(), a.width()],
                });
            }
            (a.clone(), b.clone())
        }
        None => (FlowField::zeros(h0, w0), FlowField::zeros(h0, w0)),
    };
    let coarse_weights = LossWeights {
        lambda_anat: 0.0,
        lambda_recon: 0.0,
        ..config.weights
    };
    let mut history = Vec::with_capacity(p1.len() * config.iters_per_level);
    let mut finest = Vec::with_capacity(config.iters_per_level);
    let levels = p1.len();
    for (level, (a, b)) in p1.iter().zip(&p2).enumerate() {
        let (h, w) = a.hw();
        f12 = f12.resize(h, w);
        f21 = f21.resize(h, w);
        let last = level + 1 == levels;
        let margin = if last { options.margin } else { options.margin >> (levels - 1 - level) };
        let region = if margin == 0 {
            Region::everywhere()
        } else {
            Region::interior(h, w, margin)?
        };
        let ta = as_batch(a)?;
        let tb = as_batch(b)?;
        let anat = if last { anatomy } else { None };
        let weights = if anat.is_some() { config.weights } else { coarse_weights };
        let masks = match anat {
            Some(x) => Some((
                as_batch(&gaussian_blur(x.m1.as_tensor(), options.mask_sigma))?,
                as_batch(&gaussian_blur(x.m2.as_tensor(), options.mask_sigma))?,
            )),
            None => None,
        };
        let mut recon: Option<(Tensor, Tensor)> = None;
        let mut adam = Adam::new(config.learning_rate);
        for iter in 0..config.iters_per_level {
            if let (Some(x), true) = (anat, iter % options.recon_every == 0) {
                let w1 = warp(x.m1.as_tensor(), &f12)?.warped;
                let w2 = warp(x.m2.as_tensor(), &f21)?.warped;
                let r = x.prior.reconstruct(&[w1, w2])?;
                let [r1, r2]: [Tensor; 2] = r
                    .try_into()
                    .map_err(|_| Error::invalid("shape prior must return one mask per input"))?;
                recon = Some((
                    as_batch(&gaussian_blur(&r1, options.mask_sigma))?,
                    as_batch(&gaussian_blur(&r2, options.mask_sigma))?,
                ));
            }
            let mut g = Graph::new();
            let va = g.constant(ta.clone())?;
            let vb = g.constant(tb.clone())?;
            let v12 = g.variable(f12.to_batch())?;
            let v21 = g.variable(f21.to_batch())?;
            let obj = match (&masks, &recon) {
                (Some((m1, m2)), Some((r1, r2))) => {
                    let inputs = AnatomyInputs {
                        m1: g.constant(m1.clone())?,
                        m2: g.constant(m2.clone())?,
                        m1_recon: g.constant(r1.clone())?,
                        m2_recon: g.constant(r2.clone())?,
                    };
                    aatracker_objective(&mut g, va, vb, v12, v21, &inputs, &weights, config.norm, &region)
                }
                _ => baseline_objective(&mut g, va, vb, v12, v21, &weights, config.norm, &region),
            }
            .map_err(|e| diverged("estimate_pair", e))?;
            if !obj.terms.total.is_finite() {
                return Err(Error::Divergence(format!("loss became {} at level {level}", obj.terms.total)));
            }
            g.backward(obj.loss).map_err(|e| diverged("estimate_pair", e))?;
            let g12 = gaussian_blur(&g.take_grad(v12).expect("variable has a gradient"), options.grad_sigma);
            let g21 = gaussian_blur(&g.take_grad(v21).expect("variable has a gradient"), options.grad_sigma);
            let mut d12 = f12.to_batch();
            let mut d21 = f21.to_batch();
            adam.step([
                (d12.data_mut(), g12.data()),
                (d21.data_mut(), g21.data()),
            ]);
            f12 = FlowField::from_tensor(d12).map_err(|e| diverged("estimate_pair", e))?;
            f21 = FlowField::from_tensor(d21).map_err(|e| diverged("estimate_pair", e))?;
            history.push(obj.terms);
            if last {
                finest.push(obj.terms.total);
            }
        }
    }
    let final_loss = history.last().map(|t: &TermValues| t.total).unwrap_or(f64::NAN);
    Ok(MotionPair {
        f12,
        f21,
        final_loss,
        iterations_run: history.len(),
        converged: window_converged(&finest, CONVERGENCE_WINDOW),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cine::normalize;
    use crate::synth::{generate_phantom, textured_image, PhantomConfig};

    fn shifted(img: &Tensor, dx: f64, dy: f64) -> Tensor {
        let (h, w) = img.hw();
        // i2(x) = i1(x - d): sample i1 at x - d
        warp(img, &FlowField::constant(h, w, -dx, -dy)).unwrap().warped
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let img = normalize(&textured_image(32, 32, 1));
        let cfg = EstimatorConfig {
            iters_per_level: 60,
            ..Default::default()
        };
        let p = estimate_direct(&img, &img, &cfg, None, &DirectOptions::default()).unwrap();
        assert!(p.f12.mean_magnitude() < 0.05);
        assert!(p.f21.mean_magnitude() < 0.05);
        assert_eq!(p.iterations_run, p.history.len());
    }

    #[test]
    fn recovers_translation() {
        let ph = generate_phantom(&PhantomConfig::default()).unwrap();
        let img = normalize(&ph.cine.frames[0]);
        let moved = shifted(&img, 3.0, 2.0);
        let p = estimate_direct(&img, &moved, &EstimatorConfig::default(), None, &DirectOptions::default()).unwrap();
        // f12 samples i1 at x + f12, so f12 = -(3, 2)
        let e12 = interior_epe(&p.f12, &FlowField::constant(64, 64, -3.0, -2.0));
        let e21 = interior_epe(&p.f21, &FlowField::constant(64, 64, 3.0, 2.0));
        assert!(e12 < 0.2 && e21 < 0.2, "{e12} {e21}");
    }

    fn interior_epe(f: &FlowField, truth: &FlowField) -> f64 {
        let e = f.endpoint_errors(truth).unwrap();
        let (h, w) = f.grid();
        let mut acc = Vec::new();
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                acc.push(e[y * w + x]);
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn anatomy_weights_need_masks() {
        let img = textured_image(16, 16, 0);
        let cfg = EstimatorConfig {
            weights: LossWeights::aatracker(),
            ..Default::default()
        };
        assert!(estimate_direct(&img, &img, &cfg, None, &DirectOptions::default()).is_err());
    }

    #[test]
    fn grid_mismatch() {
        let a = textured_image(16, 16, 0);
        let b = textured_image(16, 20, 0);
        assert!(matches!(
            estimate_direct(&a, &b, &EstimatorConfig::default(), None, &DirectOptions::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pyramid_depth() {
        let p = pyramid(&Tensor::zeros(&[64, 64]), 3);
        let shapes: Vec<_> = p.iter().map(|t| t.hw()).collect();
        assert_eq!(shapes, vec![(16, 16), (32, 32), (64, 64)]);
        assert_eq!(pyramid(&Tensor::zeros(&[20, 20]), 4).len(), 2);
    }
}
