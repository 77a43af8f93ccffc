//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. [`TrainConfig::echo`] renders every key with its
//! resolved value; parsing the echo gives back the same configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, TaskPreset};
use crate::nets::NetworkConfig;

/// Model variants of the component ablation, from the deblurring branch
/// alone up to the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AblationPreset {
    DeblurOnly,
    AddBlurringBranch,
    AddDisentanglement,
    AddKl,
    #[default]
    AddPerceptual,
}

/// Which parts of the model a variant enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    /// Sharp-to-blurred translation `b_s` and its cycle `ŝ`.
    pub blurring_branch: bool,
    pub blur_encoder: bool,
    pub kl: bool,
    pub perceptual: bool,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 5] = [
        AblationPreset::DeblurOnly,
        AblationPreset::AddBlurringBranch,
        AblationPreset::AddDisentanglement,
        AblationPreset::AddKl,
        AblationPreset::AddPerceptual,
    ];

    pub fn components(self) -> Components {
        let rank = AblationPreset::ALL.iter().position(|p| *p == self).expect("listed");
        Components {
            blurring_branch: rank >= 1,
            blur_encoder: rank >= 2,
            kl: rank >= 3,
            perceptual: rank >= 4,
        }
    }

    /// Row label for result tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationPreset::DeblurOnly => "Only deblurring branch",
            AblationPreset::AddBlurringBranch => "Add blurring branch",
            AblationPreset::AddDisentanglement => "Add content/blur disentanglement",
            AblationPreset::AddKl => "Add KL divergence loss",
            AblationPreset::AddPerceptual => "Add perceptual loss",
        }
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationPreset::DeblurOnly => "deblur_only",
            AblationPreset::AddBlurringBranch => "add_blurring_branch",
            AblationPreset::AddDisentanglement => "add_disentanglement",
            AblationPreset::AddKl => "add_kl",
            AblationPreset::AddPerceptual => "add_perceptual",
        })
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.to_string() == s || (s == "full" && *p == AblationPreset::AddPerceptual))
            .ok_or_else(|| Error::Config(format!("unknown ablation preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Network shape; `blur_encoder` is overridden by the ablation preset.
    pub net: NetworkConfig,
    pub batch_size: usize,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    /// Generator steps per epoch; 0 derives it from the larger manifest.
    pub iters_per_epoch: usize,
    pub lr0: f64,
    pub adam_betas: (f64, f64),
    pub d_steps_per_g: usize,
    pub task_preset: TaskPreset,
    pub ablation_preset: AblationPreset,
    pub master_seed: u64,
    /// Global gradient-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a metrics line every this many generator steps.
    pub log_every: usize,
    /// Pretrained VGG-19 weights for the perceptual loss; `None` uses the
    /// built-in surrogate extractor.
    pub vgg19_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            net: NetworkConfig::default(),
            batch_size: 16,
            epochs_flat: 40,
            epochs_decay: 40,
            iters_per_epoch: 0,
            lr0: 2e-4,
            adam_betas: (0.5, 0.999),
            d_steps_per_g: 2,
            task_preset: TaskPreset::Generic,
            ablation_preset: AblationPreset::AddPerceptual,
            master_seed: 0,
            grad_clip: 0.0,
            log_every: 1,
            vgg19_weights: None,
        }
    }
}

const KEYS: [&str; 22] = [
    "task_preset",
    "ablation_preset",
    "master_seed",
    "image_channels",
    "base_width",
    "latent_dim",
    "disc_scales",
    "crop_size",
    "lambda_adv",
    "lambda_kl",
    "lambda_cc",
    "lambda_p",
    "batch_size",
    "epochs_flat",
    "epochs_decay",
    "iters_per_epoch",
    "lr0",
    "adam_betas",
    "d_steps_per_g",
    "grad_clip",
    "log_every",
    "vgg19_weights",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    /// Desk-scale configuration: 32-pixel crops, base width 16, batch 4.
    pub fn toy(image_channels: usize) -> Self {
        TrainConfig {
            net: NetworkConfig::toy(image_channels),
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn components(&self) -> Components {
        let mut c = self.ablation_preset.components();
        if self.task_preset == TaskPreset::Text {
            c.perceptual = false;
        }
        c
    }

    /// Network configuration with the blur encoder set by the preset.
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            blur_encoder: self.components().blur_encoder,
            ..self.net.clone()
        }
    }

    /// Loss weights with disabled terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let c = self.components();
        LossWeights {
            lambda_kl: if c.kl { self.weights.lambda_kl } else { 0.0 },
            lambda_p: if c.perceptual { self.weights.lambda_p } else { 0.0 },
            ..self.weights
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.network().validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("d_steps_per_g", self.d_steps_per_g),
            ("log_every", self.log_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("epochs_flat + epochs_decay must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("`lr0` must be positive, got {}", self.lr0)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("`adam_betas` must lie in [0, 1), got {b1} {b2}")));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("`grad_clip` must be nonnegative".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task_preset" => self.task_preset = value.parse()?,
            "ablation_preset" => self.ablation_preset = value.parse()?,
            "master_seed" => self.master_seed = parse_value(key, value)?,
            "image_channels" => self.net.image_channels = parse_value(key, value)?,
            "base_width" => self.net.base_width = parse_value(key, value)?,
            "latent_dim" => self.net.latent_dim = parse_value(key, value)?,
            "disc_scales" => self.net.disc_scales = parse_value(key, value)?,
            "crop_size" => self.net.crop_size = parse_value(key, value)?,
            "lambda_adv" => self.weights.lambda_adv = parse_value(key, value)?,
            "lambda_kl" => self.weights.lambda_kl = parse_value(key, value)?,
            "lambda_cc" => self.weights.lambda_cc = parse_value(key, value)?,
            "lambda_p" => self.weights.lambda_p = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs_flat" => self.epochs_flat = parse_value(key, value)?,
            "epochs_decay" => self.epochs_decay = parse_value(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "adam_betas" => {
                let parts: Vec<&str> = value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "`adam_betas` takes two numbers, got `{value}`"
                    )));
                }
                self.adam_betas = (parse_value(key, parts[0])?, parse_value(key, parts[1])?);
            }
            "d_steps_per_g" => self.d_steps_per_g = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "vgg19_weights" => {
                self.vgg19_weights = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", lineno + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Parses a configuration; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "task_preset" => self.task_preset.to_string(),
            "ablation_preset" => self.ablation_preset.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "image_channels" => self.net.image_channels.to_string(),
            "base_width" => self.net.base_width.to_string(),
            "latent_dim" => self.net.latent_dim.to_string(),
            "disc_scales" => self.net.disc_scales.to_string(),
            "crop_size" => self.net.crop_size.to_string(),
            "lambda_adv" => self.weights.lambda_adv.to_string(),
            "lambda_kl" => self.weights.lambda_kl.to_string(),
            "lambda_cc" => self.weights.lambda_cc.to_string(),
            "lambda_p" => self.weights.lambda_p.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs_flat" => self.epochs_flat.to_string(),
            "epochs_decay" => self.epochs_decay.to_string(),
            "iters_per_epoch" => self.iters_per_epoch.to_string(),
            "lr0" => self.lr0.to_string(),
            "adam_betas" => format!("{}, {}", self.adam_betas.0, self.adam_betas.1),
            "d_steps_per_g" => self.d_steps_per_g.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "log_every" => self.log_every.to_string(),
            "vgg19_weights" => self
                .vgg19_weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => unreachable!("unlisted key"),
        }
    }

    /// Every key with its resolved value, followed by the component flags
    /// the presets imply (as comments).
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.value_of(key)));
        }
        let c = self.components();
        out.push_str(&format!("# blurring_branch = {}\n", c.blurring_branch));
        out.push_str(&format!("# blur_encoder = {}\n", c.blur_encoder));
        out.push_str(&format!("# kl_loss = {}\n", c.kl));
        out.push_str(&format!("# perceptual_loss = {}\n", c.perceptual));
        out
    }
}
