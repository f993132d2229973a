//! Plain-text run configuration.
//!
//! One `key=value` per line, `#` starts a comment. Unknown keys are
//! rejected. Overrides (from command-line flags) are applied on top of the
//! file, and [`RunConfig::resolved`] echoes every effective value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::{DirectOptions, EstimatorConfig, Parameterization};
use crate::io::parse_key_values;
use crate::losses::{ImageNorm, LossWeights};
use crate::shape_prior::{default_kld_weight, VaeArch, VaeTrainConfig};
use crate::synth::{MaskFamilyConfig, PhantomConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Standard,
    DistractorHeavy,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Suite::Standard),
            "distractor_heavy" => Ok(Suite::DistractorHeavy),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}` (expected standard or distractor_heavy)"
            ))),
        }
    }
}

impl Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Suite::Standard => "standard",
            Suite::DistractorHeavy => "distractor_heavy",
        })
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct_field" => Ok(Parameterization::DirectField),
            "siamese_net" => Ok(Parameterization::SiameseNet),
            other => Err(Error::invalid(format!(
                "unknown parameterization `{other}` (expected direct_field or siamese_net)"
            ))),
        }
    }
}

impl Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Parameterization::DirectField => "direct_field",
            Parameterization::SiameseNet => "siamese_net",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,

    pub parameterization: Parameterization,
    pub levels: usize,
    pub iters_per_level: usize,
    pub learning_rate: f64,
    pub grad_sigma: f64,
    pub recon_every: usize,
    pub mask_sigma: f64,
    pub compensate: bool,

    pub lambda_h: f64,
    pub aat_lambda_h: f64,
    pub lambda_anat: f64,
    pub lambda_recon: f64,
    pub huber_delta: f64,

    pub net_learning_rate: f64,
    pub net_steps: usize,
    pub refine_steps: usize,
    pub net_batch: usize,

    pub latent_dim: usize,
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub vae_learning_rate: f64,
    /// `None` selects `1e-3 * pixels / latent_dim`.
    pub kld_weight: Option<f64>,
    pub vae_augment: bool,

    pub suite: Suite,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub contraction_amplitude: f64,
    pub drift: f64,
    pub noise: Option<f64>,
    pub spacing_mm: f64,
    pub vae_masks: usize,
    pub weak_cines: usize,
    pub eval_cines: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: String::new(),
            parameterization: Parameterization::DirectField,
            levels: 3,
            iters_per_level: 100,
            learning_rate: 1e-2,
            grad_sigma: 3.0,
            recon_every: 1,
            mask_sigma: 2.0,
            compensate: true,
            lambda_h: 0.02,
            aat_lambda_h: 0.04,
            lambda_anat: 6.0,
            lambda_recon: 1.2,
            huber_delta: 1.0,
            net_learning_rate: 1e-3,
            net_steps: 300,
            refine_steps: 150,
            net_batch: 4,
            latent_dim: 32,
            vae_epochs: 40,
            vae_batch: 16,
            vae_learning_rate: 3e-3,
            kld_weight: None,
            vae_augment: true,
            suite: Suite::DistractorHeavy,
            height: 64,
            width: 64,
            frames: 12,
            contraction_amplitude: 0.3,
            drift: 0.0,
            noise: None,
            spacing_mm: 1.5,
            vae_masks: 300,
            weak_cines: 4,
            eval_cines: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad value `{value}` for `{key}` (expected true or false)"))),
    }
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = v.to_string(),
            "parameterization" => self.parameterization = v.parse()?,
            "levels" => self.levels = parse(key, v)?,
            "iters_per_level" => self.iters_per_level = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "grad_sigma" => self.grad_sigma = parse(key, v)?,
            "recon_every" => self.recon_every = parse(key, v)?,
            "mask_sigma" => self.mask_sigma = parse(key, v)?,
            "compensate" => self.compensate = parse_bool(key, v)?,
            "lambda_h" => self.lambda_h = parse(key, v)?,
            "aat_lambda_h" => self.aat_lambda_h = parse(key, v)?,
            "lambda_anat" => self.lambda_anat = parse(key, v)?,
            "lambda_recon" => self.lambda_recon = parse(key, v)?,
            "huber_delta" => self.huber_delta = parse(key, v)?,
            "net_learning_rate" => self.net_learning_rate = parse(key, v)?,
            "net_steps" => self.net_steps = parse(key, v)?,
            "refine_steps" => self.refine_steps = parse(key, v)?,
            "net_batch" => self.net_batch = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "vae_epochs" => self.vae_epochs = parse(key, v)?,
            "vae_batch" => self.vae_batch = parse(key, v)?,
            "vae_learning_rate" => self.vae_learning_rate = parse(key, v)?,
            "kld_weight" => self.kld_weight = auto(key, v)?,
            "vae_augment" => self.vae_augment = parse_bool(key, v)?,
            "suite" => self.suite = v.parse()?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "contraction_amplitude" => self.contraction_amplitude = parse(key, v)?,
            "drift" => self.drift = parse(key, v)?,
            "noise" => self.noise = auto(key, v)?,
            "spacing_mm" => self.spacing_mm = parse(key, v)?,
            "vae_masks" => self.vae_masks = parse(key, v)?,
            "weak_cines" => self.weak_cines = parse(key, v)?,
            "eval_cines" => self.eval_cines = parse(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults, then `file` (config text), then `overrides` in order.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            let kv = parse_key_values(text, "config").map_err(|e| Error::invalid(e.to_string()))?;
            for (k, v) in &kv {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator(self.baseline_weights()).validate()?;
        self.aatracker_weights().validate()?;
        self.vae_train_config().validate()?;
        self.vae_arch().validate()?;
        if self.recon_every == 0 || self.net_batch == 0 {
            return Err(Error::invalid("recon_every and net_batch must be >= 1"));
        }
        if !(self.mask_sigma >= 0.0) {
            return Err(Error::invalid("mask_sigma must be >= 0"));
        }
        if !(self.net_learning_rate > 0.0) {
            return Err(Error::invalid("net_learning_rate must be > 0"));
        }
        self.phantom(0).validate()
    }

    pub fn baseline_weights(&self) -> LossWeights {
        LossWeights {
            lambda_h: self.lambda_h,
            lambda_anat: 0.0,
            lambda_recon: 0.0,
            huber_delta: self.huber_delta,
        }
    }

    pub fn aatracker_weights(&self) -> LossWeights {
        LossWeights {
            lambda_h: self.aat_lambda_h,
            lambda_anat: self.lambda_anat,
            lambda_recon: self.lambda_recon,
            huber_delta: self.huber_delta,
        }
    }

    pub fn estimator(&self, weights: LossWeights) -> EstimatorConfig {
        EstimatorConfig {
            levels: self.levels,
            iters_per_level: self.iters_per_level,
            learning_rate: self.learning_rate,
            weights,
            parameterization: self.parameterization,
            norm: ImageNorm::L1,
            seed: self.seed,
        }
    }

    pub fn direct_options(&self) -> DirectOptions {
        DirectOptions {
            recon_every: self.recon_every,
            grad_sigma: self.grad_sigma,
            mask_sigma: self.mask_sigma,
            ..DirectOptions::default()
        }
    }

    pub fn vae_arch(&self) -> VaeArch {
        VaeArch {
            height: self.height,
            width: self.width,
            latent_dim: self.latent_dim,
            ..VaeArch::default()
        }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        let arch = self.vae_arch();
        VaeTrainConfig {
            epochs: self.vae_epochs,
            batch_size: self.vae_batch,
            learning_rate: self.vae_learning_rate,
            kld_weight: self.kld_weight.unwrap_or_else(|| default_kld_weight(&arch)),
            augment: self.vae_augment,
            seed: self.seed,
        }
    }

    /// Phantom of the configured suite with the given seed.
    pub fn phantom(&self, seed: u64) -> PhantomConfig {
        let base = match self.suite {
            Suite::Standard => PhantomConfig {
                seed,
                ..PhantomConfig::default()
            },
            Suite::DistractorHeavy => PhantomConfig::distractor_heavy(seed),
        };
        // geometry presets are drawn for 64x64 grids
        let k = self.height.min(self.width) as f64 / 64.0;
        PhantomConfig {
            inner_radius: base.inner_radius * k,
            wall_thickness: base.wall_thickness * k,
            distractor_radius: base.distractor_radius * k,
            distractor_gap: base.distractor_gap * k,
            height: self.height,
            width: self.width,
            frames: self.frames,
            contraction_amplitude: self.contraction_amplitude,
            drift: self.drift,
            noise: self.noise.unwrap_or(base.noise),
            spacing_mm: self.spacing_mm,
            ..base
        }
    }

    pub fn mask_family(&self) -> MaskFamilyConfig {
        let k = self.height.min(self.width) as f64 / 64.0;
        let d = MaskFamilyConfig::default();
        MaskFamilyConfig {
            height: self.height,
            width: self.width,
            inner_radius: (d.inner_radius.0 * k, d.inner_radius.1 * k),
            thickness: (d.thickness.0 * k, d.thickness.1 * k),
            center_jitter: d.center_jitter * k,
            ..d
        }
    }

    /// Every effective setting, one `key=value` per line in sorted order.
    /// Feeding this text back through [`RunConfig::from_sources`]
    /// reproduces the configuration.
    pub fn resolved(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("out", self.out.clone());
        kv.insert("parameterization", self.parameterization.to_string());
        kv.insert("levels", self.levels.to_string());
        kv.insert("iters_per_level", self.iters_per_level.to_string());
        kv.insert("learning_rate", self.learning_rate.to_string());
        kv.insert("grad_sigma", self.grad_sigma.to_string());
        kv.insert("recon_every", self.recon_every.to_string());
        kv.insert("mask_sigma", self.mask_sigma.to_string());
        kv.insert("compensate", self.compensate.to_string());
        kv.insert("lambda_h", self.lambda_h.to_string());
        kv.insert("aat_lambda_h", self.aat_lambda_h.to_string());
        kv.insert("lambda_anat", self.lambda_anat.to_string());
        kv.insert("lambda_recon", self.lambda_recon.to_string());
        kv.insert("huber_delta", self.huber_delta.to_string());
        kv.insert("net_learning_rate", self.net_learning_rate.to_string());
        kv.insert("net_steps", self.net_steps.to_string());
        kv.insert("refine_steps", self.refine_steps.to_string());
        kv.insert("net_batch", self.net_batch.to_string());
        kv.insert("latent_dim", self.latent_dim.to_string());
        kv.insert("vae_epochs", self.vae_epochs.to_string());
        kv.insert("vae_batch", self.vae_batch.to_string());
        kv.insert("vae_learning_rate", self.vae_learning_rate.to_string());
        kv.insert("kld_weight", opt(self.kld_weight));
        kv.insert("vae_augment", self.vae_augment.to_string());
        kv.insert("suite", self.suite.to_string());
        kv.insert("height", self.height.to_string());
        kv.insert("width", self.width.to_string());
        kv.insert("frames", self.frames.to_string());
        kv.insert("contraction_amplitude", self.contraction_amplitude.to_string());
        kv.insert("drift", self.drift.to_string());
        kv.insert("noise", opt(self.noise));
        kv.insert("spacing_mm", self.spacing_mm.to_string());
        kv.insert("vae_masks", self.vae_masks.to_string());
        kv.insert("weak_cines", self.weak_cines.to_string());
        kv.insert("eval_cines", self.eval_cines.to_string());
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_paper_weights() {
        let c = RunConfig::default();
        assert_eq!(c.baseline_weights().lambda_h, 0.02);
        let a = c.aatracker_weights();
        assert_eq!((a.lambda_h, a.lambda_anat, a.lambda_recon), (0.04, 6.0, 1.2));
        assert_eq!(c.latent_dim, 32);
        assert!((c.vae_train_config().kld_weight - 0.128).abs() < 1e-12);
    }

    #[test]
    fn overrides_beat_file() {
        let file = "# run\nseed = 3\nframes=8\n";
        let c = RunConfig::from_sources(Some(file), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!((c.seed, c.frames), (9, 8));
    }

    #[test]
    fn unknown_and_bad_keys_rejected() {
        assert!(RunConfig::from_sources(Some("colour=red\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("frames=many\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("seed=1\nseed=2\n"), &[]).is_err());
        assert!(RunConfig::from_sources(None, &[("contraction_amplitude".into(), "1.2".into())]).is_err());
        assert!(RunConfig::from_sources(None, &[("suite".into(), "hard".into())]).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::from_sources(
            Some("kld_weight=0.5\nparameterization=siamese_net\nsuite=standard\nlearning_rate=0.003\n"),
            &[],
        )
        .unwrap();
        let text = c.resolved();
        assert!(text.contains("kld_weight=0.5\n"));
        assert!(text.contains("noise=auto\n"));
        let back = RunConfig::from_sources(Some(&text), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved(), text);
    }
}
