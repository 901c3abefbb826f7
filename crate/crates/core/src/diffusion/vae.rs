//! Convolutional variational autoencoder providing the latent space for
//! diffusion. Trained from scratch on dataset frames; encoding at inference
//! uses the posterior mean, so encode/decode are deterministic.

use crate::autodiff::{no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Conv2dLayer, GroupNorm, ParamRegistry};
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::TrainLogEntry;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub downsample_rate: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub kl_weight: f64,
    pub norm_groups: usize,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_rate.is_power_of_two() || self.downsample_rate < 2 {
            return Err(Error::config(format!(
                "VAE downsample rate {} must be a power of two >= 2",
                self.downsample_rate
            )));
        }
        if self.image_size % self.downsample_rate != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by VAE rate {}",
                self.image_size, self.downsample_rate
            )));
        }
        if self.base_width % self.norm_groups != 0 {
            return Err(Error::config("norm groups must divide base width"));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_rate
    }

    fn levels(&self) -> usize {
        self.downsample_rate.trailing_zeros() as usize
    }

    fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            self.base_width * 2
        }
    }
}

pub struct Autoencoder {
    pub config: VaeConfig,
    enc_in: Conv2dLayer,
    enc_blocks: Vec<(GroupNorm, Conv2dLayer)>,
    enc_norm: GroupNorm,
    enc_out: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_blocks: Vec<(GroupNorm, Conv2dLayer)>,
    dec_norm: GroupNorm,
    dec_out: Conv2dLayer,
    pub latent_scale: f32,
    fitted: bool,
}

impl Autoencoder {
    pub fn new(config: VaeConfig, rng_state: RngState) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_state.rng();
        let levels = config.levels();
        let g = config.norm_groups;

        let enc_in = Conv2dLayer::new(config.channels, config.width(0), 3, (1, 1), (1, 1), &mut rng);
        let mut enc_blocks = Vec::with_capacity(levels);
        for i in 0..levels {
            let (cin, cout) = (config.width(i), config.width(i + 1));
            enc_blocks.push((
                GroupNorm::new(g, cin),
                Conv2dLayer::new(cin, cout, 3, (2, 2), (1, 1), &mut rng),
            ));
        }
        let top = config.width(levels);
        let enc_norm = GroupNorm::new(g, top);
        let enc_out = Conv2dLayer::new(top, 2 * config.latent_channels, 3, (1, 1), (1, 1), &mut rng);

        let dec_in = Conv2dLayer::new(config.latent_channels, top, 3, (1, 1), (1, 1), &mut rng);
        let mut dec_blocks = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let (cin, cout) = (config.width(i + 1), config.width(i));
            dec_blocks.push((
                GroupNorm::new(g, cin),
                Conv2dLayer::new(cin, cout, 3, (1, 1), (1, 1), &mut rng),
            ));
        }
        let dec_norm = GroupNorm::new(g, config.width(0));
        let dec_out = Conv2dLayer::new(config.width(0), config.channels, 3, (1, 1), (1, 1), &mut rng);

        Ok(Autoencoder {
            config,
            enc_in,
            enc_blocks,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_norm,
            dec_out,
            latent_scale: 1.0,
            fitted: false,
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn mark_fitted(&mut self, latent_scale: f32) {
        self.latent_scale = latent_scale;
        self.fitted = true;
    }

    /// Posterior mean and log-variance for a batch (B,C,H,W).
    pub fn encode_moments(&self, x: &Var) -> (Var, Var) {
        let mut h = self.enc_in.forward(x);
        for (gn, conv) in &self.enc_blocks {
            h = conv.forward(&gn.forward(&h).silu());
        }
        let moments = self.enc_out.forward(&self.enc_norm.forward(&h).silu());
        let shape = moments.shape();
        let (b, c2, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let c = c2 / 2;
        let rows = moments.reshape(&[b * c2, hh * ww]);
        let mut mean_idx = Vec::with_capacity(b * c);
        let mut logvar_idx = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                mean_idx.push(bi * c2 + ci);
                logvar_idx.push(bi * c2 + c + ci);
            }
        }
        let mean = rows.gather_rows(&mean_idx).reshape(&[b, c, hh, ww]);
        let logvar = rows.gather_rows(&logvar_idx).reshape(&[b, c, hh, ww]);
        (mean, logvar)
    }

    /// Decode scaled latents (B,c,h,w) to pixels in (0,1).
    pub fn decode_var(&self, z_scaled: &Var) -> Var {
        let z = z_scaled.scale(1.0 / self.latent_scale);
        let mut h = self.dec_in.forward(&z);
        for (gn, conv) in &self.dec_blocks {
            h = conv.forward(&gn.forward(&h).silu().upsample_nearest_2x());
        }
        self.dec_out.forward(&self.dec_norm.forward(&h).silu()).sigmoid()
    }

    fn check_fitted(&self) -> Result<()> {
        if self.fitted {
            Ok(())
        } else {
            Err(Error::state("autoencoder has not been trained or loaded"))
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4
            || x.shape()[1] != self.config.channels
            || x.shape()[2] != self.config.image_size
            || x.shape()[3] != self.config.image_size
        {
            return Err(Error::shape(format!(
                "expected (B,{},{},{}) input, got {:?}",
                self.config.channels,
                self.config.image_size,
                self.config.image_size,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Deterministic encode: posterior mean times the latent scale.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_fitted()?;
        self.check_input(x)?;
        let z = no_grad(|| self.encode_moments(&Var::constant(x.clone())).0.value());
        Ok(z.scale(self.latent_scale))
    }

    /// Encode a single (C,H,W) frame to its scaled latent (c,h,w).
    pub fn encode_frame(&self, frame: &Tensor) -> Result<Tensor> {
        let c = self.config.channels;
        let s = self.config.image_size;
        if frame.shape() != [c, s, s] {
            return Err(Error::shape(format!(
                "expected ({c},{s},{s}) frame, got {:?}",
                frame.shape()
            )));
        }
        let z = self.encode(&frame.reshape(&[1, c, s, s])?)?;
        let ls = self.config.latent_size();
        z.reshape(&[self.config.latent_channels, ls, ls])
    }

    /// Deterministic decode of scaled latents.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_fitted()?;
        if z.rank() != 4 || z.shape()[1] != self.config.latent_channels {
            return Err(Error::shape(format!("expected (B,{},h,w) latents, got {:?}", self.config.latent_channels, z.shape())));
        }
        Ok(no_grad(|| self.decode_var(&Var::constant(z.clone())).value()))
    }

    pub fn snapshot(&self) -> std::collections::HashMap<String, Tensor> {
        let mut reg = ParamRegistry::default();
        self.register(&mut reg);
        reg.entries.into_iter().map(|(n, v)| (n, v.value())).collect()
    }

    pub fn load_named(&self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let mut reg = ParamRegistry::default();
        self.register(&mut reg);
        for (name, var) in &reg.entries {
            let t = map
                .get(name)
                .ok_or_else(|| Error::format(format!("missing VAE parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::format(format!("VAE parameter {name} shape mismatch")));
            }
            var.set_value(t.clone());
        }
        Ok(())
    }

    /// Rebuild an identical autoencoder (used for per-thread workers).
    pub fn duplicate(&self) -> Result<Autoencoder> {
        let mut copy = Autoencoder::new(self.config.clone(), RngState::new(0, streams::INIT))?;
        copy.load_named(&self.snapshot())?;
        copy.latent_scale = self.latent_scale;
        copy.fitted = self.fitted;
        Ok(copy)
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        self.enc_in.register("vae.enc_in", reg);
        for (i, (gn, conv)) in self.enc_blocks.iter().enumerate() {
            gn.register(&format!("vae.enc{i}.norm"), reg);
            conv.register(&format!("vae.enc{i}.conv"), reg);
        }
        self.enc_norm.register("vae.enc_norm", reg);
        self.enc_out.register("vae.enc_out", reg);
        self.dec_in.register("vae.dec_in", reg);
        for (i, (gn, conv)) in self.dec_blocks.iter().enumerate() {
            gn.register(&format!("vae.dec{i}.norm"), reg);
            conv.register(&format!("vae.dec{i}.conv"), reg);
        }
        self.dec_norm.register("vae.dec_norm", reg);
        self.dec_out.register("vae.dec_out", reg);
    }
}

/// VAE training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
}

/// Train the autoencoder on individual frames (reconstruction MSE plus a
/// small KL penalty), then calibrate the latent scale to unit standard
/// deviation over the training latents.
pub fn vae_train(
    frames: &[Tensor],
    config: &VaeConfig,
    tc: &VaeTrainConfig,
    seed: u64,
) -> Result<(Autoencoder, Vec<TrainLogEntry>)> {
    if frames.is_empty() {
        return Err(Error::input("vae_train: empty dataset"));
    }
    let mut vae = Autoencoder::new(config.clone(), RngState::new(seed, streams::INIT))?;
    let kl_weight = config.kl_weight as f32;

    let mut reg = ParamRegistry::default();
    vae.register(&mut reg);
    let steps_per_epoch = frames.len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs).max(tc.warmup + 1);
    let mut adam_cfg = AdamWConfig::new(tc.lr, tc.warmup, total_steps);
    adam_cfg.weight_decay = tc.weight_decay;
    let mut opt = AdamW::new(reg.vars(), adam_cfg)?;

    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut shuffle_rng = RngState::new(seed, streams::VAE).rng();
    let mut eps_rng = RngState::new(seed, streams::VAE).child(1).rng();
    let mut log = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..tc.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let batch = stack_frames(frames, chunk)?;
            let x = Var::constant(batch);
            let (mean, logvar) = vae.encode_moments(&x);
            let eps = Var::constant(Tensor::randn(&mean.shape(), &mut eps_rng));
            let z = mean.add(&logvar.scale(0.5).exp().mul(&eps));
            let recon = vae.decode_var(&z.scale(vae.latent_scale));
            let recon_loss = recon.mse(&x);
            // KL(q || N(0,1)) per coordinate, averaged.
            let kl = mean
                .mul(&mean)
                .add(&logvar.exp())
                .sub(&logvar)
                .add_scalar(-1.0)
                .mean_all()
                .scale(0.5);
            let loss = recon_loss.add(&kl.scale(kl_weight));
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::numeric("vae_train: non-finite loss"));
            }
            opt.zero_grad();
            loss.backward();
            opt.step(step);
            log.push(TrainLogEntry {
                step,
                loss: loss_val,
                lr: crate::nn::cosine_warmup_lr(&opt.config, step),
            });
        }
    }

    // Calibrate latent scale on (up to) 256 training frames.
    vae.fitted = true;
    vae.latent_scale = 1.0;
    let probe = frames.len().min(256);
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut count = 0usize;
    for frame in frames.iter().take(probe) {
        let z = vae.encode_frame(frame)?;
        for &v in z.data() {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(1e-12);
    vae.latent_scale = (1.0 / var.sqrt()) as f32;
    Ok((vae, log))
}

fn stack_frames(frames: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    let shape = frames[indices[0]].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
    let stride = c * h * w;
    for (i, &idx) in indices.iter().enumerate() {
        if frames[idx].shape() != shape {
            return Err(Error::shape("inconsistent frame shapes in dataset"));
        }
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(frames[idx].data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> VaeConfig {
        VaeConfig {
            image_size: 16,
            channels: 1,
            downsample_rate: 4,
            latent_channels: 4,
            base_width: 16,
            kl_weight: 1e-6,
            norm_groups: 4,
        }
    }

    #[test]
    fn latent_shapes_follow_rate() {
        let cfg = toy_config();
        assert_eq!(cfg.latent_size(), 4);
        let mut vae = Autoencoder::new(cfg, RngState::new(1, 1)).unwrap();
        vae.mark_fitted(1.0);
        let x = Tensor::zeros(&[2, 1, 16, 16]);
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 4]);
        let back = vae.decode(&z).unwrap();
        assert_eq!(back.shape(), &[2, 1, 16, 16]);

        // Paper-scale geometry: rate 8 maps 256 -> 32.
        let paper = VaeConfig {
            image_size: 256,
            channels: 1,
            downsample_rate: 8,
            latent_channels: 4,
            base_width: 16,
            kl_weight: 1e-6,
            norm_groups: 4,
        };
        assert_eq!(paper.latent_size(), 32);
    }

    #[test]
    fn unfitted_encode_is_state_error() {
        let vae = Autoencoder::new(toy_config(), RngState::new(1, 1)).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(vae.encode(&x), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut vae = Autoencoder::new(toy_config(), RngState::new(1, 1)).unwrap();
        vae.mark_fitted(1.0);
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(vae.encode(&x).is_err());
    }

    #[test]
    fn training_reduces_reconstruction_loss() {
        let mut rng = RngState::new(5, 1).rng();
        // Blobs with two intensity modes.
        let frames: Vec<Tensor> = (0..24)
            .map(|i| {
                let level = if i % 2 == 0 { 0.2f32 } else { 0.8 };
                Tensor::from_fn(&[1, 16, 16], |j| {
                    let y = (j / 16) as f32 / 16.0;
                    (level * y + 0.1 * rng.uniform() as f32).clamp(0.0, 1.0)
                })
            })
            .collect();
        let tc = VaeTrainConfig { epochs: 6, batch_size: 8, lr: 2e-3, warmup: 5, weight_decay: 0.01 };
        let (vae, log) = vae_train(&frames, &toy_config(), &tc, 7).unwrap();
        assert!(vae.is_fitted());
        let head: f64 = log[..3].iter().map(|e| e.loss).sum::<f64>() / 3.0;
        let tail: f64 = log[log.len() - 3..].iter().map(|e| e.loss).sum::<f64>() / 3.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        // Deterministic encode/decode at inference.
        let z1 = vae.encode_frame(&frames[0]).unwrap();
        let z2 = vae.encode_frame(&frames[0]).unwrap();
        assert_eq!(z1.data(), z2.data());
    }
}
