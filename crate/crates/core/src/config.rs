//! Run configuration: a TOML document with a fixed key set.
//!
//! Every key is optional and falls back to the desk-scale defaults below;
//! unknown keys are rejected. Training hyperparameters (optimizer, batch
//! size, step count) are conventions, not values taken from any published run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::AdamSettings;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "ATTRIBPAINT_CONFIG";

/// Weights of the objective terms. The two adversarial terms carry unit weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_reg: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 10.0,
            lambda_reg: 1.0,
            lambda_s: 1e-4,
        }
    }
}

/// Gaussian noise added to the hot entry of the genre one-hot in training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenrePerturbationParams {
    pub mu: f64,
    pub sigma: f64,
    pub enabled: bool,
}

impl GenrePerturbationParams {
    /// The perturbed hot value is clamped to this interval.
    pub const HOT_RANGE: (f64, f64) = (0.5, 1.5);

    pub fn disabled() -> Self {
        GenrePerturbationParams {
            enabled: false,
            ..Self::default()
        }
    }
}

impl Default for GenrePerturbationParams {
    fn default() -> Self {
        GenrePerturbationParams {
            mu: 0.0,
            sigma: 0.2,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Backbone weight archive. When absent, a reduced-width backbone with
    /// the same topology is generated from the run seed.
    pub weights: Option<PathBuf>,
    /// Width divisor of the generated backbone (1 = full widths).
    pub width_divisor: Option<usize>,
}

impl PerceptualConfig {
    pub const DEFAULT_DIVISOR: usize = 8;

    pub fn divisor(&self) -> usize {
        self.width_divisor.unwrap_or(Self::DEFAULT_DIVISOR)
    }
}

/// Budget of the evaluation judge classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 2e-3,
            width: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channel_base: usize,
    pub n_downsample: usize,
    pub n_res_blocks: usize,
    pub n_adain_blocks: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    /// Stride-2 convolutions in each discriminator trunk.
    pub disc_layers: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Random horizontal flips when sampling batches.
    pub hflip: bool,
    pub loss_weights: LossWeights,
    pub perturbation: GenrePerturbationParams,
    pub optimizer: AdamSettings,
    pub perceptual: PerceptualConfig,
    pub judge: JudgeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 64,
            channel_base: 32,
            n_downsample: 2,
            n_res_blocks: 2,
            n_adain_blocks: 2,
            mlp_hidden: 256,
            mlp_layers: 3,
            disc_layers: 3,
            batch_size: 1,
            total_steps: 10_000,
            checkpoint_every: 1000,
            hflip: true,
            loss_weights: LossWeights::default(),
            perturbation: GenrePerturbationParams::default(),
            optimizer: AdamSettings::default(),
            perceptual: PerceptualConfig::default(),
            judge: JudgeConfig::default(),
        }
    }
}

impl RunConfig {
    /// 256x256 images and full-width networks; expects real backbone weights.
    pub fn full_scale() -> Self {
        RunConfig {
            image_size: 256,
            channel_base: 64,
            n_downsample: 2,
            n_res_blocks: 4,
            n_adain_blocks: 5,
            disc_layers: 4,
            total_steps: 200_000,
            checkpoint_every: 5000,
            perceptual: PerceptualConfig {
                weights: None,
                width_divisor: Some(1),
            },
            ..Self::default()
        }
    }

    /// The smallest useful model: 8x8 images, four base channels.
    pub fn miniature() -> Self {
        RunConfig {
            image_size: 8,
            channel_base: 4,
            n_downsample: 1,
            n_res_blocks: 1,
            n_adain_blocks: 1,
            mlp_hidden: 4,
            mlp_layers: 1,
            disc_layers: 2,
            batch_size: 2,
            total_steps: 4,
            checkpoint_every: 0,
            perceptual: PerceptualConfig {
                weights: None,
                width_divisor: Some(16),
            },
            judge: JudgeConfig {
                steps: 20,
                batch_size: 4,
                learning_rate: 2e-3,
                width: 4,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("channel_base", self.channel_base),
            ("n_downsample", self.n_downsample),
            ("n_res_blocks", self.n_res_blocks),
            ("n_adain_blocks", self.n_adain_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_layers", self.mlp_layers),
            ("disc_layers", self.disc_layers),
            ("batch_size", self.batch_size),
            ("judge.steps", self.judge.steps),
            ("judge.batch_size", self.judge.batch_size),
            ("judge.width", self.judge.width),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::ConfigInvalid(format!("{key} must be positive")));
            }
        }
        let factor = 1usize
            .checked_shl(self.n_downsample as u32)
            .filter(|f| *f <= self.image_size)
            .ok_or_else(|| Error::ConfigInvalid("n_downsample too large for image_size".into()))?;
        if self.image_size % factor != 0 || self.image_size % 4 != 0 {
            return Err(Error::ConfigInvalid(format!(
                "image_size not divisible by {}",
                factor.max(4)
            )));
        }
        if self.image_size < 8 {
            return Err(Error::ConfigInvalid("image_size must be at least 8".into()));
        }
        if self.image_size >> self.disc_layers == 0 {
            return Err(Error::ConfigInvalid("disc_layers too large for image_size".into()));
        }
        let w = &self.loss_weights;
        for (key, v) in [
            ("lambda_rec", w.lambda_rec),
            ("lambda_reg", w.lambda_reg),
            ("lambda_s", w.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ConfigInvalid(format!("{key} must be non-negative")));
            }
        }
        let p = &self.perturbation;
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            return Err(Error::ConfigInvalid("perturbation.sigma must be non-negative".into()));
        }
        if !p.mu.is_finite() {
            return Err(Error::ConfigInvalid("perturbation.mu must be finite".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) {
            return Err(Error::ConfigInvalid("optimizer.learning_rate must be positive".into()));
        }
        for (key, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigInvalid(format!("{key} must lie in [0, 1)")));
            }
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::ConfigInvalid("optimizer.epsilon must be positive".into()));
        }
        if !(self.judge.learning_rate > 0.0) {
            return Err(Error::ConfigInvalid("judge.learning_rate must be positive".into()));
        }
        if self.perceptual.width_divisor == Some(0) {
            return Err(Error::ConfigInvalid("perceptual.width_divisor must be positive".into()));
        }
        Ok(())
    }

    /// Channel width after the last downsampling stage.
    pub fn bottleneck_channels(&self) -> usize {
        self.channel_base << self.n_downsample
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
