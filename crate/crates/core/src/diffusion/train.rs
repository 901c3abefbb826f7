//! Two-stage generator training: image-mode pretraining on individual frames,
//! then sequence finetuning of the temporal machinery only.

use crate::autodiff::Var;
use crate::conditioning::{drop_conditions, ConditionsBank, DropProbabilities};
use crate::error::{Error, Result};
use crate::nn::{cosine_warmup_lr, AdamW, AdamWConfig};
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::{forward_diffuse, NoiseSchedule};
use super::unet::{DenoiserMode, DenoiserModel, UnetConfig};
use super::vae::Autoencoder;
use super::{NoiseModel, TrainLogEntry};

/// Optimizer/loop hyperparameters shared by both training stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub drop: DropProbabilities,
}

/// Denoising objective value: mean squared error between the drawn noise and
/// the model prediction at z_t. The bank is expected to have already passed
/// through condition dropping.
pub fn training_loss<M: NoiseModel>(
    model: &M,
    z0: &Tensor,
    bank: &ConditionsBank,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    pathway_rng: RngState,
) -> Result<f64> {
    let z_t = forward_diffuse(z0, t, eps, schedule)?;
    let pred = model.predict_noise(&z_t, t, bank, pathway_rng)?;
    if pred.shape() != eps.shape() {
        return Err(Error::shape("model prediction shape differs from noise"));
    }
    let diff = pred.sub(eps)?;
    let mse = diff.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
        / diff.numel() as f64;
    if !mse.is_finite() {
        return Err(Error::numeric("training loss is not finite"));
    }
    Ok(mse)
}

/// Pretrain an image-mode denoiser on individual frames with class, text,
/// and image-prior conditioning.
pub fn pretrain_image_ldm(
    frames: &[(Tensor, ConditionsBank)],
    vae: &Autoencoder,
    unet_config: &UnetConfig,
    schedule: &NoiseSchedule,
    tc: &LdmTrainConfig,
    seed: u64,
) -> Result<(DenoiserModel, Vec<TrainLogEntry>)> {
    if frames.is_empty() {
        return Err(Error::input("pretrain_image_ldm: empty dataset"));
    }
    if !vae.is_fitted() {
        return Err(Error::state("pretrain_image_ldm requires a trained autoencoder"));
    }
    let model = DenoiserModel::new_image(unet_config.clone(), RngState::new(seed, streams::INIT))?;

    // Latents are reused every epoch; encode once.
    let latents: Vec<Tensor> = frames
        .iter()
        .map(|(frame, _)| vae.encode_frame(frame))
        .collect::<Result<Vec<_>>>()?;

    let reg = model.named_params();
    let steps_per_epoch = frames.len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs).max(tc.warmup + 1);
    let mut adam_cfg = AdamWConfig::new(tc.lr, tc.warmup, total_steps);
    adam_cfg.weight_decay = tc.weight_decay;
    let mut opt = AdamW::new(reg.vars(), adam_cfg)?;

    let mut order: Vec<usize> = (0..frames.len()).collect();
    let base = RngState::new(seed, streams::LDM_PRETRAIN);
    let mut shuffle_rng = base.rng();
    let mut draw_rng = base.child(1).rng();
    let mut drop_rng = base.child(2).rng();
    let t_max = schedule.t_max();
    let mut log = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..tc.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let b = chunk.len();
            let lshape = latents[0].shape().to_vec();
            let (c, h, w) = (lshape[0], lshape[1], lshape[2]);
            let mut z_t = Tensor::zeros(&[b, c, h, w]);
            let mut eps = Tensor::zeros(&[b, c, h, w]);
            let mut timesteps = Vec::with_capacity(b);
            let mut banks = Vec::with_capacity(b);
            let stride = c * h * w;
            for (i, &idx) in chunk.iter().enumerate() {
                let t = 1 + draw_rng.below(t_max);
                timesteps.push(t);
                let e = Tensor::<f32>::randn(&[c, h, w], &mut draw_rng);
                let zt = forward_diffuse(&latents[idx], t, &e, schedule)?;
                eps.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(e.data());
                z_t.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(zt.data());
                banks.push(drop_conditions(&frames[idx].1, &mut drop_rng, &tc.drop));
            }
            let bank_refs: Vec<&ConditionsBank> = banks.iter().collect();
            let pred = model.forward_image(&Var::constant(z_t), &timesteps, &bank_refs)?;
            let loss = pred.mse(&Var::constant(eps));
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::numeric("pretrain: non-finite loss"));
            }
            opt.zero_grad();
            loss.backward();
            opt.step(step);
            log.push(TrainLogEntry { step, loss: loss_val, lr: cosine_warmup_lr(&opt.config, step) });
        }
    }
    Ok((model, log))
}

/// Finetune an inflated sequence model on clips. Only the temporal groups
/// (key-frame/motion block, sequential attention, motion pathway) and the
/// cross-attention query projections receive updates; every other parameter
/// is left untouched.
pub fn finetune_sequence_ldm(
    clips: &[(Tensor, ConditionsBank)],
    vae: &Autoencoder,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    tc: &LdmTrainConfig,
    seed: u64,
) -> Result<Vec<TrainLogEntry>> {
    if clips.is_empty() {
        return Err(Error::input("finetune_sequence_ldm: empty dataset"));
    }
    if model.mode != DenoiserMode::Sequence {
        return Err(Error::state("finetune requires an inflated sequence model"));
    }
    if !vae.is_fitted() {
        return Err(Error::state("finetune requires a trained autoencoder"));
    }

    // Encode each clip once: (F, c, h, w) latent stacks.
    let latents: Vec<Tensor> = clips
        .iter()
        .map(|(pixels, _)| {
            let s = pixels.shape().to_vec();
            let flat = pixels.reshape(&[s[0], s[1], s[2], s[3]])?;
            vae.encode(&flat)
        })
        .collect::<Result<Vec<_>>>()?;

    let trainable = model.finetune_trainable();
    let steps_per_epoch = clips.len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs).max(tc.warmup + 1);
    let mut adam_cfg = AdamWConfig::new(tc.lr, tc.warmup, total_steps);
    adam_cfg.weight_decay = tc.weight_decay;
    let mut opt = AdamW::new(trainable.vars(), adam_cfg)?;

    let base = RngState::new(seed, streams::LDM_FINETUNE);
    let mut shuffle_rng = base.rng();
    let mut draw_rng = base.child(1).rng();
    let mut drop_rng = base.child(2).rng();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let t_max = schedule.t_max();
    let mut log = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..tc.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let mut losses = Vec::with_capacity(chunk.len());
            for (j, &idx) in chunk.iter().enumerate() {
                let t = 1 + draw_rng.below(t_max);
                let eps = Tensor::<f32>::randn(&latents[idx].shape(), &mut draw_rng);
                let z_t = forward_diffuse(&latents[idx], t, &eps, schedule)?;
                let bank = drop_conditions(&clips[idx].1, &mut drop_rng, &tc.drop);
                let pathway_rng =
                    base.child(3).child(step as u64).child(j as u64);
                let pred =
                    model.forward_sequence(&Var::constant(z_t), t, &bank, pathway_rng)?;
                losses.push(pred.mse(&Var::constant(eps)));
            }
            let mut total = losses[0].clone();
            for l in &losses[1..] {
                total = total.add(l);
            }
            let loss = total.scale(1.0 / losses.len() as f32);
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::numeric("finetune: non-finite loss"));
            }
            opt.zero_grad();
            loss.backward();
            opt.step(step);
            log.push(TrainLogEntry { step, loss: loss_val, lr: cosine_warmup_lr(&opt.config, step) });
        }
    }
    Ok(log)
}
