//! Flat TOML run configuration.
//!
//! Every key is optional and defaults to the library default. Unknown keys
//! are rejected. `CONCL_SEED` in the environment overrides `seed`.

use std::path::Path;

use concl_core::concepts::FhParams;
use concl_core::encoder::EncoderConfig;
use concl_core::geometry::{PhotometricConfig, ViewConfig};
use concl_core::image::SynthConfig;
use concl_core::trainer::{Generator, LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CONCL_SEED";

/// Segmentation scale (and minimum size) used when the file names none.
pub const DEFAULT_FH_SCALE: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// On-disk configuration: training keys, then synthetic-data keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub epochs: u32,
    pub warmup_epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// `cosine` or `constant`.
    pub lr_schedule: String,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub k: usize,
    pub cluster_stage: usize,
    pub kmeans_iters: usize,
    /// `grid`, `fh` or `bootstrap`.
    pub generator: String,
    pub grid_s: usize,
    pub fh_scale: f64,
    pub fh_min_size: usize,
    pub fh_sigma: f64,
    pub queue_capacity: usize,
    pub ema: f64,
    pub seed: u64,
    pub symmetric: bool,
    pub widths: [usize; 5],
    pub groups: usize,
    pub hidden: usize,
    pub dim: usize,
    pub image_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub max_tries: usize,
    pub min_overlap: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub flip_prob: f64,
    pub synth_images: usize,
    pub synth_regions: usize,
    pub synth_textures: usize,
    pub synth_seed: u64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &SynthConfig::default())
    }
}

impl ConfigFile {
    pub fn from_parts(t: &TrainConfig, s: &SynthConfig) -> Self {
        let fh_default = FhParams::tied(DEFAULT_FH_SCALE);
        let (grid_s, fh) = match t.generator {
            Generator::Grid { s } => (s, fh_default),
            Generator::Fh(p) => (3, p),
            Generator::Bootstrap => (3, fh_default),
        };
        let v = &t.view;
        let p = &v.photometric;
        Self {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_schedule: match t.lr_schedule {
                LrSchedule::Cosine => "cosine",
                LrSchedule::Constant => "constant",
            }
            .into(),
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            tau: t.tau,
            k: t.k,
            cluster_stage: t.cluster_stage,
            kmeans_iters: t.kmeans_iters,
            generator: match t.generator {
                Generator::Grid { .. } => "grid",
                Generator::Fh(_) => "fh",
                Generator::Bootstrap => "bootstrap",
            }
            .into(),
            grid_s,
            fh_scale: fh.scale,
            fh_min_size: fh.min_size,
            fh_sigma: fh.sigma,
            queue_capacity: t.queue_capacity,
            ema: t.ema,
            seed: t.seed,
            symmetric: t.symmetric,
            widths: t.encoder.widths,
            groups: t.encoder.groups,
            hidden: t.encoder.hidden,
            dim: t.encoder.dim,
            image_size: v.out_size,
            scale_min: v.scale_range.0,
            scale_max: v.scale_range.1,
            ratio_min: v.ratio_range.0,
            ratio_max: v.ratio_range.1,
            max_tries: v.max_tries,
            min_overlap: v.min_overlap,
            jitter_prob: p.jitter_prob,
            brightness: p.brightness,
            contrast: p.contrast,
            saturation: p.saturation,
            hue: p.hue,
            grayscale_prob: p.grayscale_prob,
            blur_prob: p.blur_prob,
            blur_sigma_min: p.blur_sigma.0,
            blur_sigma_max: p.blur_sigma.1,
            flip_prob: p.flip_prob,
            synth_images: s.n_images,
            synth_regions: s.n_regions,
            synth_textures: s.n_textures,
            synth_seed: s.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let generator = match self.generator.as_str() {
            "grid" => Generator::Grid { s: self.grid_s },
            "fh" => Generator::Fh(FhParams {
                scale: self.fh_scale,
                min_size: self.fh_min_size,
                sigma: self.fh_sigma,
            }),
            "bootstrap" => Generator::Bootstrap,
            other => return Err(ConfigError::Invalid(format!("generator: unknown value `{other}` (expected grid, fh or bootstrap)"))),
        };
        let lr_schedule = match self.lr_schedule.as_str() {
            "cosine" => LrSchedule::Cosine,
            "constant" => LrSchedule::Constant,
            other => return Err(ConfigError::Invalid(format!("lr_schedule: unknown value `{other}` (expected cosine or constant)"))),
        };
        let t = TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_schedule,
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            tau: self.tau,
            k: self.k,
            cluster_stage: self.cluster_stage,
            kmeans_iters: self.kmeans_iters,
            generator,
            queue_capacity: self.queue_capacity,
            ema: self.ema,
            seed: self.seed,
            symmetric: self.symmetric,
            encoder: EncoderConfig {
                in_channels: 3,
                widths: self.widths,
                groups: self.groups,
                hidden: self.hidden,
                dim: self.dim,
            },
            view: ViewConfig {
                scale_range: (self.scale_min, self.scale_max),
                ratio_range: (self.ratio_min, self.ratio_max),
                out_size: self.image_size,
                max_tries: self.max_tries,
                min_overlap: self.min_overlap,
                photometric: PhotometricConfig {
                    jitter_prob: self.jitter_prob,
                    brightness: self.brightness,
                    contrast: self.contrast,
                    saturation: self.saturation,
                    hue: self.hue,
                    grayscale_prob: self.grayscale_prob,
                    blur_prob: self.blur_prob,
                    blur_sigma: (self.blur_sigma_min, self.blur_sigma_max),
                    flip_prob: self.flip_prob,
                },
            },
        };
        t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(t)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth_seed,
            n_images: self.synth_images,
            size: self.image_size,
            n_regions: self.synth_regions,
            n_textures: self.synth_textures,
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.message().to_string(),
        })
    }

    /// Reads `path`, then applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut c = Self::parse(&text, &path.display().to_string())?;
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}: expected an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
