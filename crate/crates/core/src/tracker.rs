//! Myocardium tracking through a cine from pairwise motion.
//!
//! Consecutive pairs are registered, chained into composite flows that all
//! sample the ED frame, optionally corrected by a residual registration
//! against each frame, and the ED mask is pulled through the result.

use rayon::prelude::*;

use crate::cine::{normalize, CineSequence, ED_INDEX};
use crate::error::{Error, Result};
use crate::estimator::{estimate_direct, Anatomy, DirectOptions, EstimatorConfig, ShapePrior, SiameseNet};
use crate::flow::{composite_sequence, drift_compensate, warp, FlowField};
use crate::mask::MaskImage;
use crate::metrics::{format_mean_std, MetricReport};
use crate::tensor::Tensor;

/// A configured or trained pairwise estimator.
#[derive(Clone, Debug)]
pub enum MotionModel {
    Direct {
        config: EstimatorConfig,
        options: DirectOptions,
    },
    Siamese(SiameseNet),
}

impl MotionModel {
    pub fn direct(config: EstimatorConfig) -> Self {
        MotionModel::Direct {
            config,
            options: DirectOptions::default(),
        }
    }

    /// `(F12, F21)` for one pair. `single_scale` skips the pyramid.
    pub fn estimate(
        &self,
        i1: &Tensor,
        i2: &Tensor,
        anatomy: Option<&Anatomy<'_>>,
        single_scale: bool,
    ) -> Result<(FlowField, FlowField)> {
        match self {
            MotionModel::Direct { config, options } => {
                let cfg;
                let config = if single_scale {
                    cfg = EstimatorConfig {
                        levels: 1,
                        ..config.clone()
                    };
                    &cfg
                } else {
                    config
                };
                let p = estimate_direct(i1, i2, config, anatomy, options)?;
                Ok((p.f12, p.f21))
            }
            MotionModel::Siamese(net) => net.predict(i1, i2),
        }
    }

    pub fn uses_anatomy(&self) -> bool {
        match self {
            MotionModel::Direct { config, .. } => config.weights.uses_anatomy(),
            MotionModel::Siamese(_) => false,
        }
    }
}

/// Per-frame masks plus the prior used for anatomy-aware re-estimation.
#[derive(Clone, Copy)]
pub struct AnatomyGuide<'a> {
    /// One label per frame (frame 0 included).
    pub labels: &'a [MaskImage],
    pub prior: &'a dyn ShapePrior,
}

#[derive(Clone, Copy, Default)]
pub struct TrackOptions<'a> {
    pub compensate: bool,
    pub anatomy: Option<AnatomyGuide<'a>>,
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    /// `F_(n-1)n` for `n = 1..N-1`.
    pub pairwise: Vec<FlowField>,
    /// `F̂_0n` for `n = 1..N-1`.
    pub composite: Vec<FlowField>,
    /// `F̂*_0n` when compensation ran.
    pub compensated: Option<Vec<FlowField>>,
    /// Binary masks for every frame; frame 0 is the ED annotation.
    pub tracked_masks: Vec<MaskImage>,
    pub per_frame_metrics: Option<Vec<MetricReport>>,
}

impl TrackingResult {
    /// Flows used for the tracked masks: compensated when available.
    pub fn final_flows(&self) -> &[FlowField] {
        self.compensated.as_deref().unwrap_or(&self.composite)
    }
}

fn in_frame(n: usize, e: Error) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("frame {n}: {msg}")),
        other => other,
    }
}

fn propagate(mask: &MaskImage, flow: &FlowField) -> Result<MaskImage> {
    Ok(MaskImage::soft_clamped(warp(mask.as_tensor(), flow)?.warped)?.threshold())
}

/// Tracks the ED mask through every frame of `cine`.
pub fn track_sequence(cine: &CineSequence, model: &MotionModel, options: &TrackOptions<'_>) -> Result<TrackingResult> {
    cine.validate()?;
    let n = cine.len();
    if model.uses_anatomy() && options.anatomy.is_none() {
        return Err(Error::invalid("the motion model needs anatomy labels for tracking"));
    }
    if let Some(guide) = &options.anatomy {
        if guide.labels.len() != n {
            return Err(Error::invalid(format!(
                "anatomy guide has {} labels for {n} frames",
                guide.labels.len()
            )));
        }
    }
    let frames: Vec<Tensor> = cine.frames.iter().map(normalize).collect();
    let anatomy_for = |a: usize, b: usize| {
        options.anatomy.map(|g| (g.labels[a].clone(), g.labels[b].clone(), g.prior))
    };
    let pairwise: Vec<FlowField> = (1..n)
        .into_par_iter()
        .map(|k| {
            let masks = anatomy_for(k - 1, k);
            let anat = masks.as_ref().map(|(m1, m2, prior)| Anatomy { m1, m2, prior: *prior });
            model
                .estimate(&frames[k - 1], &frames[k], anat.as_ref(), false)
                .map(|(f12, _)| f12)
                .map_err(|e| in_frame(k, e))
        })
        .collect::<Result<_>>()?;
    let composite = composite_sequence(&pairwise)?;
    let compensated = if options.compensate {
        let out: Vec<FlowField> = (1..n)
            .into_par_iter()
            .map(|k| {
                let comp = &composite[k - 1];
                let moved = warp(&frames[ED_INDEX], comp)?.warped;
                let guide = match options.anatomy {
                    Some(g) => Some((propagate(&cine.ed_mask, comp)?, g.labels[k].clone(), g.prior)),
                    None => None,
                };
                let anat = guide.as_ref().map(|(m1, m2, prior)| Anatomy { m1, m2, prior: *prior });
                let (delta, _) = model
                    .estimate(&normalize(&moved), &frames[k], anat.as_ref(), true)
                    .map_err(|e| in_frame(k, e))?;
                drift_compensate(comp, &delta)
            })
            .collect::<Result<_>>()?;
        Some(out)
    } else {
        None
    };
    let finals = compensated.as_deref().unwrap_or(&composite);
    let mut tracked_masks = Vec::with_capacity(n);
    tracked_masks.push(cine.ed_mask.threshold());
    for f in finals {
        tracked_masks.push(propagate(&cine.ed_mask, f)?);
    }
    let per_frame_metrics = match &cine.ground_truth {
        Some(gt) => Some(
            tracked_masks
                .iter()
                .zip(&gt.masks)
                .map(|(t, m)| MetricReport::compute(t, m, cine.pixel_spacing))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    Ok(TrackingResult {
        pairwise,
        composite,
        compensated,
        tracked_masks,
        per_frame_metrics,
    })
}

/// Per-frame metrics of a tracked cine.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    /// `(frame, metrics)`, ED excluded.
    pub rows: Vec<(usize, MetricReport)>,
}

impl MetricTable {
    pub fn dsc(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, r)| r.dsc).collect()
    }

    pub fn hd(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, r)| r.hd_mm).collect()
    }

    pub fn assd(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, r)| r.assd_mm).collect()
    }

    /// Metrics of the last frame.
    pub fn end_frame(&self) -> Option<MetricReport> {
        self.rows.last().map(|(_, r)| *r)
    }

    /// `DSC & HD & ASSD` as `mean(std)` cells.
    pub fn summary(&self) -> [String; 3] {
        [
            format_mean_std(&self.dsc()),
            format_mean_std(&self.hd()),
            format_mean_std(&self.assd()),
        ]
    }

    /// Rows `cine_id,frame,dsc,hd_mm,assd_mm` (no header).
    pub fn csv_rows(&self, cine_id: &str) -> String {
        self.rows
            .iter()
            .map(|(f, r)| format!("{cine_id},{f},{:.6},{:.6},{:.6}\n", r.dsc, r.hd_mm, r.assd_mm))
            .collect()
    }
}

pub const METRICS_CSV_HEADER: &str = "cine_id,frame,dsc,hd_mm,assd_mm\n";

/// Scores tracked masks against ground truth on every non-ED frame.
pub fn evaluate_tracking(result: &TrackingResult, truth: &[MaskImage], spacing: f64) -> Result<MetricTable> {
    if truth.len() != result.tracked_masks.len() {
        return Err(Error::invalid(format!(
            "{} truth masks for {} tracked frames",
            truth.len(),
            result.tracked_masks.len()
        )));
    }
    let rows = result
        .tracked_masks
        .iter()
        .zip(truth)
        .enumerate()
        .skip(1)
        .map(|(i, (t, m))| MetricReport::compute(t, m, spacing).map(|r| (i, r)))
        .collect::<Result<_>>()?;
    Ok(MetricTable { rows })
}

/// A shape prior that can also snap a single mask onto its manifold.
pub trait MaskCorrector: ShapePrior {
    fn correct(&self, mask: &MaskImage) -> Result<MaskImage>;
}

/// Weak labels for refinement: baseline-tracked masks of every frame,
/// corrected by the shape prior. Only the ED annotation of each cine is
/// read.
pub fn prepare_weak_labels(
    cines: &[CineSequence],
    baseline: &MotionModel,
    corrector: &dyn MaskCorrector,
    compensate: bool,
) -> Result<Vec<Vec<MaskImage>>> {
    cines
        .par_iter()
        .map(|cine| {
            let weak = cine.weakly_labelled();
            let tracked = track_sequence(
                &weak,
                baseline,
                &TrackOptions {
                    compensate,
                    anatomy: None,
                },
            )?;
            tracked.tracked_masks.iter().map(|m| corrector.correct(m)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::synth::{generate_phantom, PhantomConfig};

    fn fast_model() -> MotionModel {
        MotionModel::direct(EstimatorConfig {
            iters_per_level: 60,
            ..Default::default()
        })
    }

    #[test]
    fn static_cine_keeps_mask() {
        let p = generate_phantom(&PhantomConfig {
            frames: 3,
            contraction_amplitude: 0.0,
            distractor_follow: 0.0,
            noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        let r = track_sequence(&p.cine, &fast_model(), &TrackOptions::default()).unwrap();
        for m in &r.tracked_masks {
            assert!(dice(m, &p.cine.ed_mask).unwrap() > 0.99);
        }
        assert_eq!(r.pairwise.len(), 2);
        assert_eq!(r.tracked_masks.len(), 3);
    }

    #[test]
    fn two_frames_reduce_to_single_pair() {
        let p = generate_phantom(&PhantomConfig {
            frames: 2,
            ..Default::default()
        })
        .unwrap();
        let model = fast_model();
        let r = track_sequence(&p.cine, &model, &TrackOptions::default()).unwrap();
        let a = normalize(&p.cine.frames[0]);
        let b = normalize(&p.cine.frames[1]);
        let (f12, _) = model.estimate(&a, &b, None, false).unwrap();
        assert_eq!(r.composite[0], f12);
        assert_eq!(r.tracked_masks[1], propagate(&p.cine.ed_mask, &f12).unwrap());
    }

    #[test]
    fn evaluation_table() {
        let p = generate_phantom(&PhantomConfig {
            frames: 3,
            ..Default::default()
        })
        .unwrap();
        let gt = p.ground_truth();
        let perfect = TrackingResult {
            pairwise: gt.pairwise.clone(),
            composite: gt.composite.clone(),
            compensated: None,
            tracked_masks: gt.masks.clone(),
            per_frame_metrics: None,
        };
        let t = evaluate_tracking(&perfect, &gt.masks, 1.5).unwrap();
        assert_eq!(t.rows.len(), 2);
        for (_, r) in &t.rows {
            assert_eq!((r.dsc, r.hd_mm, r.assd_mm), (1.0, 0.0, 0.0));
        }
        assert_eq!(t.summary()[0], "1.000(0.000)");
        assert!(evaluate_tracking(&perfect, &gt.masks[..2], 1.5).is_err());
    }
}
