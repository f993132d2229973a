use aatracker::cine::normalize;
use aatracker::estimator::{estimate_direct, Anatomy, DirectOptions, EstimatorConfig, ShapePrior};
use aatracker::flow::{warp, FlowField};
use aatracker::losses::LossWeights;
use aatracker::metrics::dice;
use aatracker::synth::{generate_phantom, PhantomConfig};
use aatracker::{MaskImage, Result, Tensor};

/// Prior that already knows where each warped mask should land.
struct Oracle {
    m1: Tensor,
    m2: Tensor,
}

impl ShapePrior for Oracle {
    fn reconstruct(&self, masks: &[Tensor]) -> Result<Vec<Tensor>> {
        assert_eq!(masks.len(), 2);
        Ok(vec![self.m2.clone(), self.m1.clone()])
    }
}

fn interior_epe(f: &FlowField, truth: &FlowField, margin: usize) -> f64 {
    let e = f.endpoint_errors(truth).unwrap();
    let (h, w) = (f.height(), f.width());
    let (mut s, mut n) = (0.0, 0);
    for y in margin..h - margin {
        for x in margin..w - margin {
            s += e[y * w + x];
            n += 1;
        }
    }
    s / n as f64
}

fn config(weights: LossWeights) -> EstimatorConfig {
    EstimatorConfig { weights, ..Default::default() }
}

#[test]
fn perfect_masks_do_not_degrade_clean_flow() {
    let p = generate_phantom(&PhantomConfig { seed: 3, ..Default::default() }).unwrap();
    let gt = p.cine.ground_truth.as_ref().unwrap();
    let frame = |i: usize| normalize(&p.cine.frames[i]);
    for k in [3, 6, 9] {
        let (m1, m2) = (&gt.masks[k - 1], &gt.masks[k]);
        let oracle = Oracle { m1: m1.as_tensor().clone(), m2: m2.as_tensor().clone() };
        let anatomy = Anatomy { m1, m2, prior: &oracle };
        let opts = DirectOptions::default();
        let base = estimate_direct(&frame(k - 1), &frame(k), &config(LossWeights::baseline()), None, &opts).unwrap();
        let aware =
            estimate_direct(&frame(k - 1), &frame(k), &config(LossWeights::aatracker()), Some(&anatomy), &opts).unwrap();
        let eb = interior_epe(&base.f12, &gt.pairwise[k - 1], 4);
        let ea = interior_epe(&aware.f12, &gt.pairwise[k - 1], 4);
        assert!(ea <= eb + 0.1, "pair {k}: {ea} vs {eb}");
    }
}

#[test]
fn perfect_masks_help_next_to_a_distractor() {
    let p = generate_phantom(&PhantomConfig::distractor_heavy(4)).unwrap();
    let gt = p.cine.ground_truth.as_ref().unwrap();
    let frame = |i: usize| normalize(&p.cine.frames[i]);
    let k = 6;
    let (m1, m2) = (&gt.masks[k - 1], &gt.masks[k]);
    let oracle = Oracle { m1: m1.as_tensor().clone(), m2: m2.as_tensor().clone() };
    let anatomy = Anatomy { m1, m2, prior: &oracle };
    let opts = DirectOptions::default();
    let overlap = |f: &FlowField| {
        let w = MaskImage::soft_clamped(warp(m1.as_tensor(), f).unwrap().warped).unwrap().threshold();
        dice(&w, m2).unwrap()
    };
    let base = estimate_direct(&frame(k - 1), &frame(k), &config(LossWeights::baseline()), None, &opts).unwrap();
    let aware =
        estimate_direct(&frame(k - 1), &frame(k), &config(LossWeights::aatracker()), Some(&anatomy), &opts).unwrap();
    let (db, da) = (overlap(&base.f12), overlap(&aware.f12));
    assert!(da > db, "{da} vs {db}");
}
