//! Latent diffusion: noise schedule, autoencoder, conditional denoiser,
//! two-stage training, and the deterministic DDIM sampler with
//! classifier-free guidance.

pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;
pub mod vae;

pub use sampler::{cfg_predict, generate_groups, Sampler, SamplerConfig};
pub use schedule::{ddim_timesteps, forward_diffuse, NoiseSchedule, ScheduleConfig};
pub use train::{
    finetune_sequence_ldm, pretrain_image_ldm, training_loss, LdmTrainConfig,
};
pub use unet::{DenoiserMode, DenoiserModel, UnetConfig};
pub use vae::{vae_train, Autoencoder, VaeConfig, VaeTrainConfig};

use crate::conditioning::ConditionsBank;
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One optimizer step of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Anything that predicts the noise component of a latent stack at timestep
/// `t` under a conditions bank. Implemented by [`DenoiserModel`] and by test
/// stubs.
pub trait NoiseModel {
    fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        bank: &ConditionsBank,
        pathway_rng: RngState,
    ) -> Result<Tensor>;
}

impl NoiseModel for DenoiserModel {
    fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        bank: &ConditionsBank,
        pathway_rng: RngState,
    ) -> Result<Tensor> {
        self.predict(z_t, t, bank, pathway_rng)
    }
}
