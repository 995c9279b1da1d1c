//! Run configuration. Every section rejects unknown keys; omitted keys take
//! the desk-scale defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::NUM_CLASSES;
use crate::error::{PmtError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_register_tokens: usize,
    pub ffn_expansion: usize,
    pub rope_base: f64,
    pub tap_layers: Vec<usize>,
    pub freeze_encoder: bool,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub decoder_ffn_expansion: usize,
    /// Rotary positions on decoder patch tokens.
    pub decoder_rope: bool,
    /// `[L1, L2]` for the frozen-injection baseline.
    pub eomt_split: [usize; 2],
    pub num_classes: usize,
    pub anneal_start_frac: f64,
    pub anneal_end_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 128,
            num_layers: 8,
            num_heads: 4,
            num_register_tokens: 2,
            ffn_expansion: 4,
            rope_base: 100.0,
            tap_layers: vec![2, 4, 6, 8],
            freeze_encoder: true,
            num_queries: 20,
            decoder_layers: 6,
            decoder_ffn_expansion: 1,
            decoder_rope: true,
            eomt_split: [4, 4],
            num_classes: NUM_CLASSES,
            anneal_start_frac: 0.2,
            anneal_end_frac: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Spatial extent of predicted masks: a quarter of the image.
    pub fn mask_grid(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    /// Number of 2x upscaling stages from the token grid to the mask grid.
    pub fn upscale_stages(&self) -> usize {
        (self.patch_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PmtError::Config(m));
        let p = self.patch_size;
        if p < 4 || !p.is_power_of_two() {
            return err(format!("patch_size {p} must be a power of two >= 4"));
        }
        if !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return err(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head dim {} must be even for rotary positions", self.head_dim()));
        }
        if self.num_layers == 0 {
            return err("encoder needs at least one layer".into());
        }
        let taps = &self.tap_layers;
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) || taps[0] == 0 {
            return err(format!("tap_layers {taps:?} must be sorted, unique and 1-based"));
        }
        if *taps.last().unwrap() != self.num_layers {
            return err(format!("tap_layers {taps:?} must end at the final layer {}", self.num_layers));
        }
        if self.eomt_split[0] + self.eomt_split[1] != self.num_layers {
            return err(format!("eomt_split {:?} must sum to {}", self.eomt_split, self.num_layers));
        }
        if self.num_queries == 0 {
            return err("num_queries must be positive".into());
        }
        if !(0.0 <= self.anneal_start_frac && self.anneal_start_frac <= self.anneal_end_frac && self.anneal_end_frac <= 1.0) {
            return err(format!(
                "anneal window [{}, {}] must satisfy 0 <= start <= end <= 1",
                self.anneal_start_frac, self.anneal_end_frac
            ));
        }
        if self.rope_base <= 1.0 {
            return err(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub no_object_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class_weight: 2.0,
            bce_weight: 5.0,
            dice_weight: 5.0,
            no_object_weight: 0.1,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_area: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise_std: f64,
    pub color_jitter: f64,
    pub frames: usize,
    pub max_speed: f64,
    pub spawn_prob: f64,
    pub despawn_prob: f64,
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub train_clips: usize,
    pub val_clips: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            min_instances: 1,
            max_instances: 4,
            min_area: 16,
            min_radius: 6.0,
            max_radius: 13.0,
            noise_std: 0.02,
            color_jitter: 0.08,
            frames: 5,
            max_speed: 2.0,
            spawn_prob: 0.0,
            despawn_prob: 0.0,
            seed: 7,
            train_images: 1024,
            val_images: 128,
            train_clips: 256,
            val_clips: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds parameter initialization, batch sampling and mask draws.
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub clips_per_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub image_schedule: ScheduleKind,
    pub video_schedule: ScheduleKind,
    pub poly_power: f64,
    /// Gradient-accumulation shards per batch, summed in fixed order.
    pub shards: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            clips_per_batch: 2,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            image_schedule: ScheduleKind::Cosine,
            video_schedule: ScheduleKind::Poly,
            poly_power: 0.9,
            shards: 1,
            log_every: 50,
            eval_every: 0,
            pretrain_steps: 400,
            pretrain_batch_size: 16,
            pretrain_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
    pub overlap_threshold: f64,
    pub min_area: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.5,
            mask_threshold: 0.5,
            overlap_threshold: 0.8,
            min_area: 16,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| PmtError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PmtError::io(&path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = &self.model;
        if m.image_height != m.image_width || m.image_height != self.data.image_size {
            return Err(PmtError::config(format!(
                "model image {}x{} does not match synthetic image size {}",
                m.image_height, m.image_width, self.data.image_size
            )));
        }
        if m.num_classes != NUM_CLASSES {
            return Err(PmtError::config(format!(
                "num_classes {} does not match the synthetic class set ({NUM_CLASSES})",
                m.num_classes
            )));
        }
        if self.data.min_instances > self.data.max_instances {
            return Err(PmtError::config("min_instances exceeds max_instances"));
        }
        // Stuff segments plus every instance must fit in the query set.
        if self.data.max_instances + 2 > m.num_queries {
            return Err(PmtError::config(format!(
                "num_queries {} cannot cover {} instances plus 2 stuff segments",
                m.num_queries, self.data.max_instances
            )));
        }
        if self.train.batch_size == 0 || self.train.shards == 0 || !self.train.batch_size.is_multiple_of(self.train.shards) {
            return Err(PmtError::config("batch_size must be a positive multiple of shards"));
        }
        if self.data.frames < 2 {
            return Err(PmtError::config("clips need at least 2 frames"));
        }
        for (name, v) in [
            ("class_weight", self.loss.class_weight),
            ("bce_weight", self.loss.bce_weight),
            ("dice_weight", self.loss.dice_weight),
            ("no_object_weight", self.loss.no_object_weight),
        ] {
            if v < 0.0 {
                return Err(PmtError::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}
