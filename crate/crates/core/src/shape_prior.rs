//! Convolutional VAE over myocardium masks, used as a shape prior.
//!
//! Encoder: three stride-2 convolutions and a dense layer producing
//! `(mu, logvar)`. Decoder: a dense layer back to the coarsest feature grid
//! and three stride-2 transposed convolutions to mask logits. Correction
//! decodes the mean latent without sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimator::ShapePrior;
use crate::io::Checkpoint;
use crate::losses::kld_loss;
use crate::mask::MaskImage;
use crate::nn::{he_uniform, Adam, ParamStore};
use crate::tensor::{Graph, Tensor, Unary, Var};
use crate::tracker::MaskCorrector;

const SLOPE: f64 = 0.1;
pub const LATENT_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeArch {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub latent_dim: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: [8, 16, 32],
            latent_dim: LATENT_DIM,
        }
    }
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("VAE grid must be a non-zero multiple of 8"));
        }
        if self.channels.contains(&0) || self.latent_dim == 0 {
            return Err(Error::invalid("VAE channels and latent_dim must be >= 1"));
        }
        Ok(())
    }

    fn coarse(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    fn flat(&self) -> usize {
        let (h, w) = self.coarse();
        self.channels[2] * h * w
    }

    /// `(name, shape, fan_in)` in storage order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let [c1, c2, c3] = self.channels;
        let (flat, z) = (self.flat(), self.latent_dim);
        vec![
            ("enc1.weight", vec![c1, 1, 3, 3], 9),
            ("enc1.bias", vec![c1], 9),
            ("enc2.weight", vec![c2, c1, 3, 3], c1 * 9),
            ("enc2.bias", vec![c2], c1 * 9),
            ("enc3.weight", vec![c3, c2, 3, 3], c2 * 9),
            ("enc3.bias", vec![c3], c2 * 9),
            ("latent.weight", vec![2 * z, flat], flat),
            ("latent.bias", vec![2 * z], flat),
            ("expand.weight", vec![flat, z], z),
            ("expand.bias", vec![flat], z),
            ("dec1.weight", vec![c3, c2, 4, 4], c3 * 4),
            ("dec1.bias", vec![c2], c3 * 4),
            ("dec2.weight", vec![c2, c1, 4, 4], c2 * 4),
            ("dec2.bias", vec![c1], c2 * 4),
            ("dec3.weight", vec![c1, 1, 4, 4], c1 * 4),
            ("dec3.bias", vec![1], c1 * 4),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub params: ParamStore,
}

fn lrelu(g: &mut Graph, x: Var) -> Result<Var> {
    g.unary(Unary::LeakyRelu(SLOPE), x)
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in arch.layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                he_uniform(&shape, fan_in, &mut rng)
            };
            params.insert(name, t)?;
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: VaeArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::malformed(
                "vae checkpoint",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape, _), p) in layout.iter().zip(params.params()) {
            if p.name != *name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::malformed(
                    "vae checkpoint",
                    format!("expected {name} {shape:?}, got {} {:?}", p.name, p.tensor.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.arch;
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "vae")
            .with_meta("height", a.height)
            .with_meta("width", a.width)
            .with_meta("channels", format!("{},{},{}", a.channels[0], a.channels[1], a.channels[2]))
            .with_meta("latent_dim", a.latent_dim)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some("vae") {
            return Err(Error::malformed("vae checkpoint", "not a VAE checkpoint"));
        }
        let raw: String = ck.meta_value("channels")?;
        let ch: Vec<usize> = raw
            .split(',')
            .map(|c| c.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed("vae checkpoint", format!("bad channels `{raw}`")))?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| Error::malformed("vae checkpoint", "expected three channel widths"))?;
        let arch = VaeArch {
            height: ck.meta_value("height")?,
            width: ck.meta_value("width")?,
            channels,
            latent_dim: ck.meta_value("latent_dim")?,
        };
        arch.validate().map_err(|e| Error::malformed("vae checkpoint", e.to_string()))?;
        Self::from_params(arch, ck.params.clone())
    }

    fn check_mask(&self, m: &Tensor) -> Result<()> {
        if m.shape() != [self.arch.height, self.arch.width] {
            return Err(Error::ShapeMismatch {
                op: "vae input",
                left: vec![self.arch.height, self.arch.width],
                right: m.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the encoder on `[N, 1, H, W]`; returns `(mu, logvar)` as
    /// `[N, latent]` each.
    pub fn encode_graph(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let mut h = x;
        for k in 0..3 {
            let c = g.conv2d(h, v[2 * k], Some(v[2 * k + 1]), 2, 1)?;
            h = lrelu(g, c)?;
        }
        let flat = g.reshape(h, &[n, self.arch.flat()])?;
        let stats = g.linear(flat, v[6], Some(v[7]))?;
        let z = self.arch.latent_dim;
        Ok((g.narrow(stats, 0, z)?, g.narrow(stats, z, z)?))
    }

    /// Records the decoder on `[N, latent]`; returns logits `[N, 1, H, W]`.
    pub fn decode_graph(&self, g: &mut Graph, v: &[Var], z: Var) -> Result<Var> {
        let n = g.shape(z)[0];
        let (ch, cw) = self.arch.coarse();
        let e = g.linear(z, v[8], Some(v[9]))?;
        let e = g.reshape(e, &[n, self.arch.channels[2], ch, cw])?;
        let mut h = lrelu(g, e)?;
        for k in 0..3 {
            let t = g.conv_transpose2d(h, v[10 + 2 * k], Some(v[11 + 2 * k]), 2, 1)?;
            h = if k < 2 { lrelu(g, t)? } else { t };
        }
        Ok(h)
    }

    /// Training loss on a batch `x` of `[N, 1, H, W]` masks with standard
    /// normal draws `eps` of `[N, latent]`: summed BCE per sample plus
    /// `kld_weight` times the KL divergence.
    pub fn loss_graph(&self, g: &mut Graph, v: &[Var], x: Var, eps: Var, kld_weight: f64) -> Result<Var> {
        let n = g.shape(x)[0];
        let (mu, logvar) = self.encode_graph(g, v, x)?;
        let half = g.scale(logvar, 0.5)?;
        let std = g.unary(Unary::Exp, half)?;
        let noise = g.mul(std, eps)?;
        let code = g.add(mu, noise)?;
        let logits = self.decode_graph(g, v, code)?;
        let bce = g.bce_with_logits(logits, x)?;
        let bce = g.sum(bce)?;
        let recon = g.scale(bce, 1.0 / n as f64)?;
        let kld = kld_loss(g, mu, logvar)?;
        let kld = g.scale(kld, kld_weight)?;
        g.add(recon, kld)
    }

    fn batch(&self, masks: &[Tensor]) -> Result<Tensor> {
        let (h, w) = (self.arch.height, self.arch.width);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            self.check_mask(m)?;
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![masks.len(), 1, h, w], data)
    }

    /// Latent statistics `(mu, logvar)` of one mask.
    pub fn encode(&self, mask: &MaskImage) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g)?;
        let x = g.constant(self.batch(std::slice::from_ref(mask.as_tensor()))?)?;
        let (mu, logvar) = self.encode_graph(&mut g, &v, x)?;
        Ok((g.value(mu).data().to_vec(), g.value(logvar).data().to_vec()))
    }

    /// Soft masks decoded from latent codes.
    pub fn decode(&self, latents: &[Vec<f64>]) -> Result<Vec<MaskImage>> {
        let z = self.arch.latent_dim;
        if latents.is_empty() || latents.iter().any(|l| l.len() != z) {
            return Err(Error::invalid(format!("latent codes must have length {z}")));
        }
        let flat: Vec<f64> = latents.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g)?;
        let zv = g.constant(Tensor::new(vec![latents.len(), z], flat)?)?;
        let logits = self.decode_graph(&mut g, &v, zv)?;
        let probs = g.unary(Unary::Sigmoid, logits)?;
        self.unbatch(g.value(probs))
    }

    fn unbatch(&self, t: &Tensor) -> Result<Vec<MaskImage>> {
        let (h, w) = (self.arch.height, self.arch.width);
        t.data()
            .chunks(h * w)
            .map(|c| MaskImage::soft_clamped(Tensor::new(vec![h, w], c.to_vec())?))
            .collect()
    }

    /// `decode(mu + exp(logvar / 2) * eps)` with seeded `eps ~ N(0, I)`.
    pub fn sample_and_decode(&self, mu: &[f64], logvar: &[f64], seed: u64) -> Result<MaskImage> {
        let z = self.arch.latent_dim;
        if mu.len() != z || logvar.len() != z {
            return Err(Error::invalid(format!("mu and logvar must have length {z}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code: Vec<f64> = mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + (0.5 * lv).exp() * e
            })
            .collect();
        Ok(self.decode(&[code])?.remove(0))
    }

    /// Mean-latent reconstructions of a batch of soft masks.
    pub fn correct_batch(&self, masks: &[Tensor]) -> Result<Vec<MaskImage>> {
        if masks.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g)?;
        let x = g.constant(self.batch(masks)?)?;
        let (mu, _) = self.encode_graph(&mut g, &v, x)?;
        let logits = self.decode_graph(&mut g, &v, mu)?;
        let probs = g.unary(Unary::Sigmoid, logits)?;
        self.unbatch(g.value(probs))
    }

    /// Anatomy-corrected soft mask: the decoded mean latent.
    pub fn correct(&self, mask: &MaskImage) -> Result<MaskImage> {
        Ok(self.correct_batch(std::slice::from_ref(mask.as_tensor()))?.remove(0))
    }
}

impl ShapePrior for VaeModel {
    fn reconstruct(&self, masks: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self
            .correct_batch(masks)?
            .into_iter()
            .map(|m| m.as_tensor().clone())
            .collect())
    }
}

impl MaskCorrector for VaeModel {
    fn correct(&self, mask: &MaskImage) -> Result<MaskImage> {
        Ok(VaeModel::correct(self, mask)?.threshold())
    }
}

/// `kld_weight` default: `1e-3 * pixels / latent_dim`.
pub fn default_kld_weight(arch: &VaeArch) -> f64 {
    1e-3 * (arch.height * arch.width) as f64 / arch.latent_dim as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kld_weight: f64,
    pub augment: bool,
    pub seed: u64,
}

impl VaeTrainConfig {
    pub fn new(arch: &VaeArch) -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            kld_weight: default_kld_weight(arch),
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.kld_weight >= 0.0) {
            return Err(Error::invalid("learning_rate must be > 0 and kld_weight >= 0"));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default)]
pub struct VaeTrainReport {
    pub epoch_losses: Vec<f64>,
}

impl VaeTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.9e}\n"));
        }
        s
    }
}

/// Rotates a mask about its grid centre by `degrees` (nearest neighbour;
/// pixels from outside the grid are background).
pub fn rotate_mask(mask: &MaskImage, degrees: f64) -> MaskImage {
    let (h, w) = mask.grid();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    MaskImage::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = (c * dx + s * dy + cx).round();
        let sy = (-s * dx + c * dy + cy).round();
        sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h && mask.get(sy as usize, sx as usize)
    })
}

fn augment(mask: &MaskImage, rng: &mut ChaCha8Rng) -> MaskImage {
    let mut m = mask.threshold();
    if rng.random_bool(0.5) {
        m = m.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        m = m.flip_vertical();
    }
    let k = rng.random_range(0..24);
    if k != 0 {
        m = rotate_mask(&m, 15.0 * k as f64);
    }
    m
}

/// Trains a fresh VAE on `masks` with BCE (summed over pixels, averaged over
/// the batch) plus `kld_weight * KLD`.
pub fn train_vae(
    masks: &[MaskImage],
    arch: VaeArch,
    config: &VaeTrainConfig,
) -> Result<(VaeModel, VaeTrainReport)> {
    config.validate()?;
    if masks.is_empty() {
        return Err(Error::InsufficientData("VAE training needs at least one mask".into()));
    }
    let mut model = VaeModel::new(arch, config.seed)?;
    for m in masks {
        model.check_mask(m.as_tensor())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut report = VaeTrainReport::default();
    let z = arch.latent_dim;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&masks[i], &mut rng).as_tensor().clone()
                    } else {
                        masks[i].threshold().as_tensor().clone()
                    }
                })
                .collect();
            let eps = Tensor::from_fn(&[batch.len(), z], |_| StandardNormal.sample(&mut rng));
            let mut g = Graph::new();
            let v = model.params.bind(&mut g)?;
            let x = g.constant(model.batch(&batch)?)?;
            let e = g.constant(eps)?;
            let loss = model.loss_graph(&mut g, &v, x, e, config.kld_weight)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("VAE loss became {value} in epoch {epoch}")));
            }
            g.backward(loss)?;
            model.params.collect_grads(&mut g, &v);
            adam.step_store(&mut model.params);
            total += value;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok((model, report))
}
