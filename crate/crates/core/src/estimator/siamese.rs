//! Siamese convolutional motion network.
//!
//! A shared three-level encoder embeds each image. The decoder sees the
//! concatenated features of both images coarse-to-fine and predicts a flow
//! at every scale, each finer head adding a residual to the upsampled
//! coarser flow. It is evaluated once per input order, `F12 = D(a, b)` and
//! `F21 = D(b, a)`, so swapping the inputs swaps the outputs exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{warp, FlowField};
use crate::io::Checkpoint;
use crate::losses::{aatracker_objective, baseline_objective, AnatomyInputs, LossWeights, Objective, Region};
use crate::mask::MaskImage;
use crate::nn::{he_uniform, Adam, ParamStore};
use crate::tensor::{Graph, Tensor, Unary, Var};

use super::{check_anatomy, check_pair, diverged, window_converged, Anatomy, EstimatorConfig, MotionPair, ShapePrior};

const SLOPE: f64 = 0.1;
const HEAD_GAIN: f64 = 0.1;

/// Channel widths of the three encoder levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiameseArch {
    pub channels: [usize; 3],
}

impl Default for SiameseArch {
    fn default() -> Self {
        Self { channels: [8, 16, 32] }
    }
}

impl SiameseArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::invalid("siamese channel widths must be >= 1"));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let [c1, c2, c3] = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9));
            out.push((format!("{name}.bias"), vec![cout], cin * 9));
        };
        conv("enc1", c1, 1);
        conv("enc2", c2, c1);
        conv("enc3", c3, c2);
        conv("dec3", c3, 2 * c3);
        conv("head3", 2, c3);
        conv("dec2", c2, 2 * c2 + c3);
        conv("head2", 2, c2);
        conv("dec1", c1, 2 * c1 + c2);
        conv("head1", 2, c1);
        out
    }
}

/// Closed-form parameter count of the architecture.
pub fn siamese_param_count(arch: &SiameseArch) -> usize {
    let [c1, c2, c3] = arch.channels;
    let conv = |cout: usize, cin: usize| cout * cin * 9 + cout;
    conv(c1, 1)
        + conv(c2, c1)
        + conv(c3, c2)
        + conv(c3, 2 * c3)
        + conv(2, c3)
        + conv(c2, 2 * c2 + c3)
        + conv(2, c2)
        + conv(c1, 2 * c1 + c2)
        + conv(2, c1)
}

/// One training pair, optionally with the masks used by the anatomy terms.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub i1: Tensor,
    pub i2: Tensor,
    pub masks: Option<(MaskImage, MaskImage)>,
}

impl PairSample {
    pub fn new(i1: Tensor, i2: Tensor) -> Self {
        Self { i1, i2, masks: None }
    }
}

/// Per-step losses of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub converged: bool,
}

impl TrainReport {
    /// `step,loss` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.9e}\n"));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SiameseNet {
    pub arch: SiameseArch,
    pub params: ParamStore,
}

struct Bound {
    v: Vec<Var>,
}

impl Bound {
    fn conv(&self, g: &mut Graph, idx: usize, x: Var, stride: usize) -> Result<Var> {
        g.conv2d(x, self.v[2 * idx], Some(self.v[2 * idx + 1]), stride, 1)
    }
}

fn lrelu(g: &mut Graph, x: Var) -> Result<Var> {
    g.unary(Unary::LeakyRelu(SLOPE), x)
}

impl SiameseNet {
    pub fn new(arch: SiameseArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in arch.layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.starts_with("head") {
                he_uniform(&shape, fan_in, &mut rng).map(|v| v * HEAD_GAIN)
            } else {
                he_uniform(&shape, fan_in, &mut rng)
            };
            params.insert(name, t)?;
        }
        Ok(Self { arch, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(arch: SiameseArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::malformed(
                "siamese checkpoint",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape, _), p) in layout.iter().zip(params.params()) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::malformed(
                    "siamese checkpoint",
                    format!("expected {name} {shape:?}, got {} {:?}", p.name, p.tensor.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = self.arch.channels;
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "siamese")
            .with_meta("channels", format!("{},{},{}", c[0], c[1], c[2]))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some("siamese") {
            return Err(Error::malformed("siamese checkpoint", "not a Siamese network checkpoint"));
        }
        let raw: String = ck.meta_value("channels")?;
        let ch: Vec<usize> = raw
            .split(',')
            .map(|c| c.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed("siamese checkpoint", format!("bad channels `{raw}`")))?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| Error::malformed("siamese checkpoint", "expected three channel widths"))?;
        Self::from_params(SiameseArch { channels }, ck.params.clone())
            .map_err(|e| match e {
                Error::Malformed { .. } => e,
                other => Error::malformed("siamese checkpoint", other.to_string()),
            })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_grid(&self, grid: (usize, usize)) -> Result<()> {
        if grid.0 % 4 != 0 || grid.1 % 4 != 0 || grid.0 < 8 || grid.1 < 8 {
            return Err(Error::InvalidShape {
                op: "siamese",
                detail: format!("grid {grid:?} must be a multiple of 4 and at least 8"),
            });
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<[Var; 3]> {
        let c = b.conv(g, 0, x, 1)?;
        let e1 = lrelu(g, c)?;
        let c = b.conv(g, 1, e1, 2)?;
        let e2 = lrelu(g, c)?;
        let c = b.conv(g, 2, e2, 2)?;
        let e3 = lrelu(g, c)?;
        Ok([e1, e2, e3])
    }

    fn decode(&self, g: &mut Graph, b: &Bound, a: &[Var; 3], o: &[Var; 3]) -> Result<Var> {
        let x3 = g.concat(&[a[2], o[2]])?;
        let c = b.conv(g, 3, x3, 1)?;
        let h3 = lrelu(g, c)?;
        let flow3 = b.conv(g, 4, h3, 1)?;

        let up = g.upsample2x(h3)?;
        let x2 = g.concat(&[a[1], o[1], up])?;
        let c = b.conv(g, 5, x2, 1)?;
        let h2 = lrelu(g, c)?;
        let r2 = b.conv(g, 6, h2, 1)?;
        let f = g.upsample2x(flow3)?;
        let f = g.scale(f, 2.0)?;
        let flow2 = g.add(f, r2)?;

        let up = g.upsample2x(h2)?;
        let x1 = g.concat(&[a[0], o[0], up])?;
        let c = b.conv(g, 7, x1, 1)?;
        let h1 = lrelu(g, c)?;
        let r1 = b.conv(g, 8, h1, 1)?;
        let f = g.upsample2x(flow2)?;
        let f = g.scale(f, 2.0)?;
        g.add(f, r1)
    }

    /// Records the forward pass; returns `(F12, F21)` as `[1, 2, H, W]`.
    fn forward(&self, g: &mut Graph, vars: &[Var], i1: Var, i2: Var) -> Result<(Var, Var)> {
        let b = Bound { v: vars.to_vec() };
        let e1 = self.encode(g, &b, i1)?;
        let e2 = self.encode(g, &b, i2)?;
        let f12 = self.decode(g, &b, &e1, &e2)?;
        let f21 = self.decode(g, &b, &e2, &e1)?;
        Ok((f12, f21))
    }

    /// Inference: `(F12, F21)` for one pair of `[H, W]` images.
    pub fn predict(&self, i1: &Tensor, i2: &Tensor) -> Result<(FlowField, FlowField)> {
        let grid = check_pair(i1, i2)?;
        self.check_grid(grid)?;
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g)?;
        let a = g.constant(batch(i1)?)?;
        let b = g.constant(batch(i2)?)?;
        let (f12, f21) = self.forward(&mut g, &vars, a, b)?;
        Ok((
            FlowField::from_tensor(g.value(f12).clone())?,
            FlowField::from_tensor(g.value(f21).clone())?,
        ))
    }

    /// Records the objective of one sample on `g`.
    fn sample_objective(
        &self,
        g: &mut Graph,
        vars: &[Var],
        sample: &PairSample,
        weights: &LossWeights,
        config: &EstimatorConfig,
        prior: Option<&dyn ShapePrior>,
    ) -> Result<Objective> {
        let a = g.constant(batch(&sample.i1)?)?;
        let b = g.constant(batch(&sample.i2)?)?;
        let (f12, f21) = self.forward(g, vars, a, b)?;
        let region = Region::everywhere();
        match (&sample.masks, prior, weights.uses_anatomy()) {
            (Some((m1, m2)), Some(prior), true) => {
                let fl12 = FlowField::from_tensor(g.value(f12).clone())?;
                let fl21 = FlowField::from_tensor(g.value(f21).clone())?;
                let w1 = warp(m1.as_tensor(), &fl12)?.warped;
                let w2 = warp(m2.as_tensor(), &fl21)?.warped;
                let r = prior.reconstruct(&[w1, w2])?;
                if r.len() != 2 {
                    return Err(Error::invalid("shape prior must return one mask per input"));
                }
                let inputs = AnatomyInputs {
                    m1: g.constant(batch(m1.as_tensor())?)?,
                    m2: g.constant(batch(m2.as_tensor())?)?,
                    m1_recon: g.constant(batch(&r[0])?)?,
                    m2_recon: g.constant(batch(&r[1])?)?,
                };
                aatracker_objective(g, a, b, f12, f21, &inputs, weights, config.norm, &region)
            }
            (_, _, true) => Err(Error::invalid(
                "anatomy weights are non-zero but the sample has no masks or no prior was given",
            )),
            _ => baseline_objective(g, a, b, f12, f21, weights, config.norm, &region),
        }
    }

    /// Mean objective over `samples` without updating anything.
    pub fn evaluate(
        &self,
        samples: &[PairSample],
        config: &EstimatorConfig,
        prior: Option<&dyn ShapePrior>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let mut g = Graph::new();
            let vars = self.params.bind_frozen(&mut g)?;
            total += self.sample_objective(&mut g, &vars, s, &config.weights, config, prior)?.terms.total;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Adam on the mean objective over shuffled mini-batches.
    fn fit(
        &mut self,
        samples: &[PairSample],
        config: &EstimatorConfig,
        steps: usize,
        batch_size: usize,
        prior: Option<&dyn ShapePrior>,
    ) -> Result<TrainReport> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::InsufficientData("training needs at least one pair".into()));
        }
        if batch_size == 0 || steps == 0 {
            return Err(Error::invalid("steps and batch_size must be >= 1"));
        }
        let grid = check_pair(&samples[0].i1, &samples[0].i2)?;
        self.check_grid(grid)?;
        for s in samples {
            if check_pair(&s.i1, &s.i2)? != grid {
                return Err(Error::invalid("all training pairs must share one grid"));
            }
            if let Some((m1, m2)) = &s.masks {
                check_anatomy(
                    &Anatomy {
                        m1,
                        m2,
                        prior: &NoPrior,
                    },
                    grid,
                )?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = order.len();
        let mut adam = Adam::new(config.learning_rate);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g)?;
            let mut terms = Vec::with_capacity(batch_size);
            for _ in 0..batch_size.min(samples.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let s = &samples[order[cursor]];
                cursor += 1;
                let obj = self
                    .sample_objective(&mut g, &vars, s, &config.weights, config, prior)
                    .map_err(|e| diverged("train_siamese", e))?;
                terms.push(obj.loss);
            }
            let sum = g.add_all(&terms)?;
            let loss = g.scale(sum, 1.0 / terms.len() as f64)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("training loss became {value}")));
            }
            g.backward(loss).map_err(|e| diverged("train_siamese", e))?;
            self.params.collect_grads(&mut g, &vars);
            adam.step_store(&mut self.params);
            losses.push(value);
        }
        let converged = window_converged(&losses, 50);
        Ok(TrainReport { losses, converged })
    }
}

struct NoPrior;

impl ShapePrior for NoPrior {
    fn reconstruct(&self, masks: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(masks.to_vec())
    }
}

fn batch(image: &Tensor) -> Result<Tensor> {
    let (h, w) = image.hw();
    image.clone().reshape(&[1, 1, h, w])
}

/// Trains a fresh network on the baseline objective.
pub fn train_siamese(
    dataset: &[PairSample],
    arch: SiameseArch,
    config: &EstimatorConfig,
    steps: usize,
    batch_size: usize,
) -> Result<(SiameseNet, TrainReport)> {
    if config.weights.uses_anatomy() {
        return Err(Error::invalid("baseline training takes baseline weights (no anatomy terms)"));
    }
    let mut net = SiameseNet::new(arch, config.seed)?;
    let report = net.fit(dataset, config, steps, batch_size, None)?;
    Ok((net, report))
}

/// Fine-tunes a trained network on the anatomy-aware objective. Samples
/// must carry the (shape-prior-corrected) masks of both images.
pub fn refine_anatomy_aware(
    net: &SiameseNet,
    dataset: &[PairSample],
    prior: &dyn ShapePrior,
    config: &EstimatorConfig,
    steps: usize,
    batch_size: usize,
) -> Result<(SiameseNet, TrainReport)> {
    if config.weights.uses_anatomy() && dataset.iter().any(|s| s.masks.is_none()) {
        return Err(Error::invalid("every refinement pair needs masks"));
    }
    let mut out = net.clone();
    let report = out.fit(dataset, config, steps, batch_size, Some(prior))?;
    Ok((out, report))
}

/// Optimizes a freshly initialized network on a single pair.
pub(super) fn estimate_instance(
    i1: &Tensor,
    i2: &Tensor,
    config: &EstimatorConfig,
    anatomy: Option<&Anatomy<'_>>,
) -> Result<MotionPair> {
    let grid = check_pair(i1, i2)?;
    let masks = match anatomy {
        Some(a) => {
            check_anatomy(a, grid)?;
            Some((a.m1.clone(), a.m2.clone()))
        }
        None => None,
    };
    let sample = PairSample {
        i1: i1.clone(),
        i2: i2.clone(),
        masks,
    };
    let mut net = SiameseNet::new(SiameseArch::default(), config.seed)?;
    let steps = config.levels * config.iters_per_level;
    let report = net.fit(std::slice::from_ref(&sample), config, steps, 1, anatomy.map(|a| a.prior))?;
    let (f12, f21) = net.predict(i1, i2)?;
    Ok(MotionPair {
        f12,
        f21,
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        iterations_run: report.losses.len(),
        history: Vec::new(),
        converged: report.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::textured_image;

    #[test]
    fn default_param_count() {
        // enc 80 + 1168 + 4640, dec3 18464, head3 578, dec2 9232, head2 290,
        // dec1 2312, head1 146
        assert_eq!(siamese_param_count(&SiameseArch::default()), 36910);
        let net = SiameseNet::new(SiameseArch::default(), 0).unwrap();
        assert_eq!(net.param_count(), 36910);
    }

    #[test]
    fn swapping_inputs_swaps_outputs() {
        let net = SiameseNet::new(SiameseArch { channels: [4, 4, 8] }, 3).unwrap();
        let a = textured_image(16, 16, 1);
        let b = textured_image(16, 16, 2);
        let (f12, f21) = net.predict(&a, &b).unwrap();
        let (g12, g21) = net.predict(&b, &a).unwrap();
        assert_eq!(f12, g21);
        assert_eq!(f21, g12);
        assert!(f12.as_tensor().all_finite());
        assert_eq!(f12.grid(), (16, 16));
    }

    #[test]
    fn grid_must_be_multiple_of_four() {
        let net = SiameseNet::new(SiameseArch { channels: [2, 2, 2] }, 0).unwrap();
        let a = textured_image(18, 18, 1);
        assert!(net.predict(&a, &a).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let arch = SiameseArch { channels: [2, 4, 4] };
        let data = vec![PairSample::new(textured_image(16, 16, 1), textured_image(16, 16, 2))];
        let cfg = EstimatorConfig {
            learning_rate: 1e-3,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = train_siamese(&data, arch, &cfg, 5, 1).unwrap();
        let (b, _) = train_siamese(&data, arch, &cfg, 5, 1).unwrap();
        for (p, q) in a.params.params().iter().zip(b.params.params()) {
            assert_eq!(p.tensor, q.tensor);
        }
        assert_eq!(ra.losses.len(), 5);
        assert!(ra.to_csv().starts_with("step,loss\n0,"));
    }

    #[test]
    fn from_params_checks_layout() {
        let net = SiameseNet::new(SiameseArch { channels: [2, 2, 2] }, 0).unwrap();
        assert!(SiameseNet::from_params(net.arch, net.params.clone()).is_ok());
        assert!(SiameseNet::from_params(SiameseArch { channels: [2, 2, 4] }, net.params).is_err());
    }
}
