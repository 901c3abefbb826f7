//! Experiment configuration: one structured file holding every tunable the
//! pipeline reads, with `toy` (CPU-minutes) and `paper_scale` presets.
//! Unknown keys are rejected on load.

use crate::conditioning::DropProbabilities;
use crate::diffusion::{
    LdmTrainConfig, SamplerConfig, ScheduleConfig, UnetConfig, VaeConfig, VaeTrainConfig,
};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::io::fnv1a;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::classifier::{AugmentConfig, ClassifierConfig};
use super::toydata::{ToyDatasetSpec, VOCAB};

/// Block-matching motion extraction parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionExtractConfig {
    pub block: usize,
    pub radius: usize,
}

impl Default for MotionExtractConfig {
    fn default() -> Self {
        MotionExtractConfig { block: 4, radius: 3 }
    }
}

/// How many clips to synthesize and how they are grouped under banks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub clips_per_class: usize,
    pub clips_per_group: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: ToyDatasetSpec,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub schedule: ScheduleConfig,
    pub unet: UnetConfig,
    pub pretrain: LdmTrainConfig,
    pub finetune: LdmTrainConfig,
    pub sampler: SamplerConfig,
    pub synthesis: SynthesisConfig,
    pub motion: MotionExtractConfig,
    pub filter: FilterConfig,
    pub classifier: ClassifierConfig,
    pub eval_seeds: usize,
    pub threads: usize,
}

impl Config {
    /// Desk-scale defaults: 32x32 single-channel clips, VAE rate 4, 8 frames,
    /// 3 imbalanced classes.
    pub fn toy() -> Self {
        Config {
            dataset: ToyDatasetSpec::default(),
            vae: VaeConfig {
                image_size: 32,
                channels: 1,
                downsample_rate: 4,
                latent_channels: 4,
                base_width: 32,
                kl_weight: 1e-6,
                norm_groups: 8,
            },
            vae_train: VaeTrainConfig {
                epochs: 6,
                batch_size: 16,
                lr: 1e-3,
                warmup: 50,
                weight_decay: 0.01,
            },
            schedule: ScheduleConfig::default(),
            unet: UnetConfig {
                latent_channels: 4,
                latent_size: 8,
                pixel_channels: 1,
                base_width: 64,
                channel_mults: vec![1, 2, 2],
                time_dim: 128,
                context_dim: 64,
                num_classes: 3,
                vocab_size: VOCAB.len(),
                motion_channels: 4,
                patch_scale: 4,
                frames: 8,
                image_size: 32,
                prior_rate: 8,
                norm_groups: 8,
            },
            pretrain: LdmTrainConfig {
                epochs: 10,
                batch_size: 16,
                lr: 3e-4,
                warmup: 100,
                weight_decay: 0.01,
                drop: DropProbabilities::default(),
            },
            finetune: LdmTrainConfig {
                epochs: 6,
                batch_size: 2,
                lr: 3e-4,
                warmup: 50,
                weight_decay: 0.01,
                drop: DropProbabilities::default(),
            },
            sampler: SamplerConfig { steps: 30, guidance_scale: 5.0, seed: 0, eta: 0.0 },
            synthesis: SynthesisConfig { clips_per_class: 50, clips_per_group: 2 },
            motion: MotionExtractConfig::default(),
            filter: FilterConfig::default(),
            classifier: ClassifierConfig {
                num_classes: 3,
                in_channels: 1,
                widths: vec![16, 32, 64],
                epochs: 24,
                pretrain_epochs: 12,
                batch_size: 8,
                lr: 1e-3,
                warmup: 20,
                weight_decay: 0.0,
                norm_groups: 8,
                augment: AugmentConfig::default(),
            },
            eval_seeds: 3,
            threads: 1,
        }
    }

    /// The settings used at full scale: 256x256 frames, VAE rate 8, T=1000,
    /// 200 sampling steps, guidance 7.5, AdamW lr 1e-4 with 500-step warmup
    /// and cosine decay, pretraining batch 64, finetuning batch 8, 200
    /// epochs, and the Adam(1e-4)/100-epoch/batch-8 downstream recipe.
    pub fn paper_scale() -> Self {
        let mut config = Config::toy();
        config.dataset = ToyDatasetSpec {
            num_classes: 3,
            train_counts: vec![141, 104, 64],
            test_counts: vec![51, 27, 20],
            image_size: 256,
            frames: 8,
            channels: 1,
            noise_sigma: 0.02,
            background_level: 0.1,
            seed: 0,
        };
        config.vae = VaeConfig {
            image_size: 256,
            channels: 1,
            downsample_rate: 8,
            latent_channels: 4,
            base_width: 32,
            kl_weight: 1e-6,
            norm_groups: 8,
        };
        config.vae_train = VaeTrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            warmup: 500,
            weight_decay: 0.01,
        };
        config.unet = UnetConfig {
            latent_channels: 4,
            latent_size: 32,
            pixel_channels: 1,
            base_width: 64,
            channel_mults: vec![1, 2, 2],
            time_dim: 128,
            context_dim: 64,
            num_classes: 3,
            vocab_size: VOCAB.len(),
            motion_channels: 4,
            patch_scale: 8,
            frames: 8,
            image_size: 256,
            prior_rate: 32,
            norm_groups: 8,
        };
        config.pretrain = LdmTrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-4,
            warmup: 500,
            weight_decay: 0.01,
            drop: DropProbabilities::default(),
        };
        config.finetune = LdmTrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            warmup: 500,
            weight_decay: 0.01,
            drop: DropProbabilities::default(),
        };
        config.sampler = SamplerConfig { steps: 200, guidance_scale: 7.5, seed: 0, eta: 0.0 };
        config.synthesis = SynthesisConfig { clips_per_class: 500, clips_per_group: 5 };
        config.unet.patch_scale = 8;
        config.classifier = ClassifierConfig {
            num_classes: 3,
            in_channels: 1,
            widths: vec![16, 32, 64],
            epochs: 100,
            pretrain_epochs: 50,
            batch_size: 8,
            lr: 1e-4,
            warmup: 0,
            weight_decay: 0.0,
            norm_groups: 8,
            augment: AugmentConfig::default(),
        };
        config
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Config::toy()),
            "paper" | "paper-scale" => Ok(Config::paper_scale()),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.vae.validate()?;
        self.unet.validate()?;
        self.classifier.validate()?;
        self.sampler.validate(self.schedule.timesteps)?;
        let checks: [(bool, &str); 12] = [
            (
                self.unet.latent_channels == self.vae.latent_channels,
                "unet.latent_channels must match vae.latent_channels",
            ),
            (
                self.unet.latent_size == self.vae.latent_size(),
                "unet.latent_size must equal vae image_size / downsample_rate",
            ),
            (
                self.unet.image_size == self.dataset.image_size
                    && self.vae.image_size == self.dataset.image_size,
                "unet, vae, and dataset image sizes must agree",
            ),
            (
                self.unet.pixel_channels == self.dataset.channels
                    && self.vae.channels == self.dataset.channels
                    && self.classifier.in_channels == self.dataset.channels,
                "channel counts must agree across dataset, vae, unet, classifier",
            ),
            (self.unet.frames == self.dataset.frames, "unet.frames must match dataset.frames"),
            (
                self.unet.num_classes == self.dataset.num_classes
                    && self.classifier.num_classes == self.dataset.num_classes,
                "class counts must agree across dataset, unet, classifier",
            ),
            (self.unet.vocab_size == VOCAB.len(), "unet.vocab_size must match the toy vocabulary"),
            (
                self.synthesis.clips_per_group >= 1
                    && self.synthesis.clips_per_class % self.synthesis.clips_per_group == 0,
                "clips_per_group must divide clips_per_class",
            ),
            (
                self.motion.block > 0 && self.dataset.image_size % self.motion.block == 0,
                "motion block must divide the image size",
            ),
            (self.filter.kmeans_k >= 4, "filter kmeans_k must be at least 4"),
            (self.eval_seeds >= 1, "eval_seeds must be at least 1"),
            (self.threads >= 1, "threads must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        self.pretrain_adamw().validate()?;
        Ok(())
    }

    fn pretrain_adamw(&self) -> crate::nn::AdamWConfig {
        crate::nn::AdamWConfig::new(self.pretrain.lr, self.pretrain.warmup, usize::MAX / 2)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(compact.as_bytes()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let config: Config = crate::io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::toy().validate().unwrap();
        Config::paper_scale().validate().unwrap();
    }

    #[test]
    fn paper_preset_echoes_published_values() {
        let c = Config::paper_scale();
        assert_eq!(c.schedule.timesteps, 1000);
        assert_eq!(c.sampler.steps, 200);
        assert_eq!(c.sampler.guidance_scale, 7.5);
        assert_eq!(c.vae.downsample_rate, 8);
        assert_eq!(c.pretrain.lr, 1e-4);
        assert_eq!(c.pretrain.warmup, 500);
        assert_eq!(c.pretrain.batch_size, 64);
        assert_eq!(c.finetune.batch_size, 8);
        assert_eq!(c.pretrain.epochs, 200);
        assert_eq!(c.classifier.lr, 1e-4);
        assert_eq!(c.classifier.epochs, 100);
        assert_eq!(c.classifier.batch_size, 8);
        assert_eq!(c.unet.patch_scale, 8);
    }

    #[test]
    fn json_roundtrip_and_hash_stability() {
        let c = Config::toy();
        let json = c.to_json();
        let back: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(back.hash(), c.hash());

        let mut other = Config::toy();
        other.sampler.steps = 31;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::toy().to_json()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("mystery_knob".to_string(), serde_json::json!(1));
        let text = serde_json::to_string(&v).unwrap();
        assert!(serde_json::from_str::<Config>(&text).is_err());
    }

    #[test]
    fn cross_field_validation_catches_mismatch() {
        let mut c = Config::toy();
        c.unet.latent_size = 16;
        assert!(c.validate().is_err());
        let mut c = Config::toy();
        c.synthesis.clips_per_group = 3; // does not divide 50
        assert!(c.validate().is_err());
    }
}
