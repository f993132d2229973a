//! Symmetric pairwise motion estimation.
//!
//! Two parameterizations minimize the same objectives: a per-pair dense
//! displacement field solved coarse-to-fine ([`estimate_pair`] with
//! [`Parameterization::DirectField`]) and a Siamese convolutional network
//! ([`SiameseNet`]).

mod direct;
mod siamese;

pub use direct::{estimate_direct, DirectOptions};
pub use siamese::{
    refine_anatomy_aware, siamese_param_count, train_siamese, PairSample, SiameseArch, SiameseNet, TrainReport,
};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::losses::{ImageNorm, LossWeights, TermValues};
use crate::mask::MaskImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parameterization {
    #[default]
    DirectField,
    SiameseNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    /// Pyramid depth; level 1 is the input resolution only.
    pub levels: usize,
    pub iters_per_level: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub parameterization: Parameterization,
    pub norm: ImageNorm,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters_per_level: 150,
            learning_rate: 1e-2,
            weights: LossWeights::baseline(),
            parameterization: Parameterization::DirectField,
            norm: ImageNorm::L1,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.iters_per_level < 1 {
            return Err(Error::invalid("levels and iters_per_level must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        self.weights.validate()
    }
}

/// Estimated flows for one image pair.
#[derive(Clone, Debug)]
pub struct MotionPair {
    /// Flow on the grid of image 2 sampling image 1.
    pub f12: FlowField,
    /// Flow on the grid of image 1 sampling image 2.
    pub f21: FlowField,
    pub final_loss: f64,
    pub iterations_run: usize,
    /// Objective terms per iteration, all levels in order.
    pub history: Vec<TermValues>,
    /// False when the finest-level loss stopped decreasing over its last
    /// 50-iteration window.
    pub converged: bool,
}

/// A fixed shape prior that maps (possibly implausible) masks to
/// plausible ones. Must not depend on call order.
pub trait ShapePrior: Sync {
    /// Reconstructs each `[H, W]` soft mask.
    fn reconstruct(&self, masks: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Masks of both images plus the prior used by the anatomy-aware objective.
#[derive(Clone, Copy)]
pub struct Anatomy<'a> {
    pub m1: &'a MaskImage,
    pub m2: &'a MaskImage,
    pub prior: &'a dyn ShapePrior,
}

/// Estimates `(F12, F21)` for one pair by minimizing the baseline objective,
/// or the anatomy-aware objective when `anatomy` is given.
///
/// With [`Parameterization::SiameseNet`] a freshly initialized network is
/// optimized on this pair alone.
pub fn estimate_pair(
    i1: &Tensor,
    i2: &Tensor,
    config: &EstimatorConfig,
    anatomy: Option<&Anatomy<'_>>,
) -> Result<MotionPair> {
    match config.parameterization {
        Parameterization::DirectField => estimate_direct(i1, i2, config, anatomy, &DirectOptions::default()),
        Parameterization::SiameseNet => siamese::estimate_instance(i1, i2, config, anatomy),
    }
}

/// Flags a run whose loss failed to decrease over its last window.
pub(crate) fn window_converged(losses: &[f64], window: usize) -> bool {
    if losses.len() < 2 * window {
        return true;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&losses[n - window..]);
    let prev = mean(&losses[n - 2 * window..n - window]);
    last <= prev * (1.0 + 1e-3) + 1e-12
}

pub(crate) fn diverged(op: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { op: inner } => Error::Divergence(format!("{op}: non-finite value in {inner}")),
        other => other,
    }
}

pub(crate) fn check_pair(i1: &Tensor, i2: &Tensor) -> Result<(usize, usize)> {
    if i1.ndim() != 2 || i2.ndim() != 2 {
        return Err(Error::InvalidShape {
            op: "estimate_pair",
            detail: format!("expected [H, W] images, got {:?} and {:?}", i1.shape(), i2.shape()),
        });
    }
    if i1.shape() != i2.shape() {
        return Err(Error::ShapeMismatch {
            op: "estimate_pair",
            left: i1.shape().to_vec(),
            right: i2.shape().to_vec(),
        });
    }
    if !i1.all_finite() || !i2.all_finite() {
        return Err(Error::NonFinite { op: "estimate_pair input" });
    }
    Ok(i1.hw())
}

pub(crate) fn check_anatomy(anatomy: &Anatomy<'_>, grid: (usize, usize)) -> Result<()> {
    if anatomy.m1.grid() != grid || anatomy.m2.grid() != grid {
        return Err(Error::ShapeMismatch {
            op: "anatomy masks",
            left: vec![grid.0, grid.1],
            right: vec![anatomy.m1.height(), anatomy.m1.width()],
        });
    }
    Ok(())
}
