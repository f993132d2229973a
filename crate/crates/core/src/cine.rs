//! Cine sequences: ordered frames of one cardiac cycle with the ED
//! annotation. Frame 0 is always end-diastole.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::mask::MaskImage;
use crate::tensor::Tensor;

/// Index of the annotated end-diastolic frame.
pub const ED_INDEX: usize = 0;

/// Per-frame ground truth, available for synthetic data only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Myocardium mask of every frame.
    pub masks: Vec<MaskImage>,
    /// `F_(n-1)n` for `n = 1..N-1` (frame n grid, sampling frame n-1).
    pub pairwise: Vec<FlowField>,
    /// `F̂_0n` for `n = 1..N-1` (frame n grid, sampling frame 0).
    pub composite: Vec<FlowField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub frames: Vec<Tensor>,
    /// Isotropic pixel spacing in millimetres.
    pub pixel_spacing: f64,
    pub ed_mask: MaskImage,
    pub ground_truth: Option<GroundTruth>,
}

impl CineSequence {
    pub fn new(frames: Vec<Tensor>, pixel_spacing: f64, ed_mask: MaskImage) -> Result<Self> {
        let cine = Self {
            frames,
            pixel_spacing,
            ed_mask,
            ground_truth: None,
        };
        cine.validate()?;
        Ok(cine)
    }

    pub fn with_ground_truth(mut self, gt: GroundTruth) -> Result<Self> {
        self.ground_truth = Some(gt);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.frames[0].hw()
    }

    /// The same cine without any ground truth beyond the ED mask.
    pub fn weakly_labelled(&self) -> CineSequence {
        CineSequence {
            ground_truth: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InsufficientData("a cine needs at least 2 frames".into()));
        }
        if !(self.pixel_spacing.is_finite() && self.pixel_spacing > 0.0) {
            return Err(Error::invalid("pixel spacing must be > 0"));
        }
        let grid = self.frames[0].hw();
        for (i, f) in self.frames.iter().enumerate() {
            if f.ndim() != 2 || f.hw() != grid {
                return Err(Error::InvalidShape {
                    op: "cine",
                    detail: format!("frame {i} has shape {:?}, expected {grid:?}", f.shape()),
                });
            }
        }
        if self.ed_mask.grid() != grid {
            return Err(Error::InvalidShape {
                op: "cine",
                detail: "ED mask grid differs from frames".into(),
            });
        }
        if let Some(gt) = &self.ground_truth {
            let n = self.frames.len();
            if gt.masks.len() != n || gt.pairwise.len() != n - 1 || gt.composite.len() != n - 1 {
                return Err(Error::InvalidShape {
                    op: "cine",
                    detail: "ground-truth lengths inconsistent with frame count".into(),
                });
            }
        }
        Ok(())
    }
}

/// Zero-mean, unit-standard-deviation copy of an image.
pub fn normalize(image: &Tensor) -> Tensor {
    let mean = image.mean();
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / image.len() as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return image.map(|v| v - mean);
    }
    image.map(|v| (v - mean) / std)
}
