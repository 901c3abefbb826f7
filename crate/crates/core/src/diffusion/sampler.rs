//! Deterministic DDIM sampling with classifier-free guidance, and grouped
//! synthesis under condition banks.

use crate::conditioning::ConditionsBank;
use crate::error::{Error, Result};
use crate::filter::SyntheticGroup;
use crate::pipeline::clip::{SequenceClip, Source};
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::{ddim_timesteps, NoiseSchedule};
use super::unet::DenoiserModel;
use super::vae::Autoencoder;
use super::NoiseModel;

/// Sampling parameters. `eta` is fixed at 0 (fully deterministic DDIM) and
/// recorded here so the configuration spells it out.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 200, guidance_scale: 7.5, seed: 0, eta: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps == 0 || self.steps > t_max {
            return Err(Error::config(format!(
                "sampling steps {} outside [1, {t_max}]",
                self.steps
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::config("guidance scale must be >= 0"));
        }
        if self.eta != 0.0 {
            return Err(Error::config("only eta = 0 (deterministic DDIM) is supported"));
        }
        Ok(())
    }
}

/// Classifier-free guidance:
/// eps = eps(z,null,t) + s * (eps(z,bank,t) - eps(z,null,t)).
///
/// s = 1 returns the conditional prediction exactly and skips the
/// unconditional branch; s = 0 returns the unconditional prediction.
pub fn cfg_predict<M: NoiseModel>(
    model: &M,
    z_t: &Tensor,
    t: usize,
    bank: &ConditionsBank,
    scale: f64,
    pathway_rng: RngState,
) -> Result<Tensor> {
    if scale < 0.0 {
        return Err(Error::config("guidance scale must be >= 0"));
    }
    if scale == 0.0 {
        return model.predict_noise(z_t, t, &ConditionsBank::empty(), pathway_rng);
    }
    let cond = model.predict_noise(z_t, t, bank, pathway_rng)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict_noise(z_t, t, &ConditionsBank::empty(), pathway_rng)?;
    uncond.add(&cond.sub(&uncond)?.scale(scale as f32))
}

/// Bundles the pieces needed to draw clips.
pub struct Sampler<'a, M: NoiseModel> {
    pub model: &'a M,
    pub vae: &'a Autoencoder,
    pub schedule: &'a NoiseSchedule,
    pub frames: usize,
}

impl<'a, M: NoiseModel> Sampler<'a, M> {
    /// Deterministic DDIM trajectory from seeded Gaussian latents, decoded to
    /// pixels. Bit-identical for identical (seed, bank, config).
    pub fn sample_clip(&self, bank: &ConditionsBank, config: &SamplerConfig) -> Result<Tensor> {
        config.validate(self.schedule.t_max())?;
        bank.validate(self.frames)?;
        let c = self.vae.config.latent_channels;
        let hw = self.vae.config.latent_size();
        let mut rng = RngState::new(config.seed, streams::SAMPLING).rng();
        let mut z = Tensor::<f32>::randn(&[self.frames, c, hw, hw], &mut rng);

        let ts = ddim_timesteps(self.schedule.t_max(), config.steps)?;
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            let t_prev = if i > 0 { ts[i - 1] } else { 0 };
            let pathway_rng = RngState::new(config.seed, streams::PATHWAYS).child(t as u64);
            let eps = cfg_predict(self.model, &z, t, bank, config.guidance_scale, pathway_rng)?;
            let ab_t = self.schedule.alpha_bar(t);
            let ab_prev = self.schedule.alpha_bar(t_prev);
            let c_sig = (1.0 - ab_t).sqrt() as f32;
            let inv_sqrt = (1.0 / ab_t.sqrt()) as f32;
            let z0 = z.sub(&eps.scale(c_sig))?.scale(inv_sqrt);
            z = z0.scale(ab_prev.sqrt() as f32).add(&eps.scale((1.0 - ab_prev).sqrt() as f32))?;
            z.assert_finite("ddim step")?;
        }
        let pixels = self.vae.decode(&z)?;
        pixels.assert_finite("decoded clip")?;
        Ok(pixels)
    }
}

/// Seed for clip `index` of group `group` under per-group size `m`.
pub fn derived_clip_seed(seed: u64, group: usize, m: usize, index: usize) -> u64 {
    seed + (group * m + index) as u64
}

/// Synthesize `clips_per_group` clips under each conditions bank. Group i,
/// clip j uses the derived seed `seed + i*M + j`. With `threads > 1` clips
/// are sampled in parallel on per-thread model replicas; per-clip outputs do
/// not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn generate_groups(
    model: &DenoiserModel,
    vae: &Autoencoder,
    schedule: &NoiseSchedule,
    banks: &[ConditionsBank],
    clips_per_group: usize,
    config: &SamplerConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<SyntheticGroup>> {
    if clips_per_group == 0 {
        return Err(Error::config("clips_per_group must be >= 1"));
    }
    for bank in banks {
        if bank.class_label.is_none() {
            return Err(Error::input("synthetic groups require a class label in each bank"));
        }
    }
    let frames = model.config.frames;
    let jobs: Vec<(usize, usize)> = (0..banks.len())
        .flat_map(|g| (0..clips_per_group).map(move |i| (g, i)))
        .collect();

    let sample_one = |model: &DenoiserModel,
                      vae: &Autoencoder,
                      g: usize,
                      i: usize|
     -> Result<Tensor> {
        let mut cfg = *config;
        cfg.seed = derived_clip_seed(seed, g, clips_per_group, i);
        let sampler = Sampler { model, vae, schedule, frames };
        sampler.sample_clip(&banks[g], &cfg)
    };

    let results: Vec<Result<Tensor>> = if threads <= 1 {
        jobs.iter().map(|&(g, i)| sample_one(model, vae, g, i)).collect()
    } else {
        // Model graphs are thread-local; each worker rebuilds the model and
        // autoencoder from plain-data snapshots. Per-clip outputs depend only
        // on the derived seed, so the partition into chunks is irrelevant.
        let model_snap = model.snapshot();
        let model_config = model.config.clone();
        let vae_snap = vae.snapshot();
        let vae_config = vae.config.clone();
        let latent_scale = vae.latent_scale;
        let chunk = jobs.len().div_ceil(threads);
        let mut slots: Vec<Option<Result<Tensor>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (slot_chunk, job_chunk) in slots.chunks_mut(chunk).zip(jobs.chunks(chunk)) {
                let model_snap = &model_snap;
                let model_config = &model_config;
                let vae_snap = &vae_snap;
                let vae_config = &vae_config;
                let sample_one = &sample_one;
                scope.spawn(move || {
                    let built = (|| -> Result<(DenoiserModel, Autoencoder)> {
                        let m = DenoiserModel::new_sequence(
                            model_config.clone(),
                            RngState::new(0, streams::INIT),
                        )?;
                        m.load_named(model_snap, true)?;
                        let mut v =
                            Autoencoder::new(vae_config.clone(), RngState::new(0, streams::INIT))?;
                        v.load_named(vae_snap)?;
                        v.mark_fitted(latent_scale);
                        Ok((m, v))
                    })();
                    match built {
                        Ok((m, v)) => {
                            for (slot, &(g, i)) in slot_chunk.iter_mut().zip(job_chunk) {
                                *slot = Some(sample_one(&m, &v, g, i));
                            }
                        }
                        Err(e) => {
                            let msg = format!("sampler worker init failed: {e}");
                            for slot in slot_chunk.iter_mut() {
                                *slot = Some(Err(Error::state(msg.clone())));
                            }
                        }
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("all jobs processed")).collect()
    };

    let mut groups: Vec<SyntheticGroup> = banks
        .iter()
        .enumerate()
        .map(|(g, bank)| SyntheticGroup {
            group_id: g,
            bank: bank.clone(),
            clips: Vec::with_capacity(clips_per_group),
        })
        .collect();
    for (&(g, i), result) in jobs.iter().zip(results) {
        let pixels = result?;
        let class_id = banks[g].class_label.expect("checked above");
        let clip = SequenceClip::new(
            format!("syn-g{g:03}-c{i:02}"),
            pixels,
            class_id,
            banks[g].text.clone().unwrap_or_default(),
            Source::Synthetic,
        )?;
        groups[g].clips.push(clip);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditionsBank;

    /// Stub that returns a fixed multiple of the input.
    struct ScaledModel {
        factor: f32,
        cond_offset: f32,
    }

    impl NoiseModel for ScaledModel {
        fn predict_noise(
            &self,
            z_t: &Tensor,
            _t: usize,
            bank: &ConditionsBank,
            _rng: RngState,
        ) -> Result<Tensor> {
            let base = z_t.scale(self.factor);
            if bank.is_fully_null() {
                Ok(base)
            } else {
                Ok(base.map(|v| v + self.cond_offset))
            }
        }
    }

    #[test]
    fn cfg_scale_one_is_conditional_exactly() {
        let model = ScaledModel { factor: 0.3, cond_offset: 0.7 };
        let z = Tensor::from_fn(&[2, 2], |i| i as f32 * 0.1 - 0.15);
        let bank = ConditionsBank { class_label: Some(0), ..Default::default() };
        let got = cfg_predict(&model, &z, 5, &bank, 1.0, RngState::new(1, 1)).unwrap();
        let cond = model.predict_noise(&z, 5, &bank, RngState::new(1, 1)).unwrap();
        assert_eq!(got.data(), cond.data());
    }

    #[test]
    fn cfg_scale_zero_is_unconditional() {
        let model = ScaledModel { factor: 0.3, cond_offset: 0.7 };
        let z = Tensor::from_fn(&[4], |i| i as f32);
        let bank = ConditionsBank { class_label: Some(0), ..Default::default() };
        let got = cfg_predict(&model, &z, 5, &bank, 0.0, RngState::new(1, 1)).unwrap();
        let uncond =
            cfg_predict(&model, &z, 5, &ConditionsBank::empty(), 3.0, RngState::new(1, 1)).unwrap();
        assert_eq!(got.data(), uncond.data());
    }

    #[test]
    fn cfg_affine_in_scale() {
        let model = ScaledModel { factor: 0.5, cond_offset: 1.0 };
        let z = Tensor::from_fn(&[3], |i| i as f32 * 0.2);
        let bank = ConditionsBank { class_label: Some(1), ..Default::default() };
        let rng = RngState::new(1, 1);
        let e0 = cfg_predict(&model, &z, 1, &bank, 0.0, rng).unwrap();
        let e1 = cfg_predict(&model, &z, 1, &bank, 1.0, rng).unwrap();
        let e75 = cfg_predict(&model, &z, 1, &bank, 7.5, rng).unwrap();
        for j in 0..3 {
            let want = e0.data()[j] + 7.5 * (e1.data()[j] - e0.data()[j]);
            assert!((e75.data()[j] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn cfg_rejects_negative_scale() {
        let model = ScaledModel { factor: 0.5, cond_offset: 1.0 };
        let z = Tensor::zeros(&[1]);
        let bank = ConditionsBank::empty();
        assert!(cfg_predict(&model, &z, 1, &bank, -0.1, RngState::new(1, 1)).is_err());
    }

    #[test]
    fn sampler_config_validation() {
        let cfg = SamplerConfig::default();
        assert!(cfg.validate(1000).is_ok());
        assert!(cfg.validate(100).is_err()); // steps 200 > T=100
        let bad = SamplerConfig { guidance_scale: -1.0, ..Default::default() };
        assert!(bad.validate(1000).is_err());
    }

    #[test]
    fn derived_seeds_enumerate() {
        assert_eq!(derived_clip_seed(100, 0, 3, 0), 100);
        assert_eq!(derived_clip_seed(100, 0, 3, 2), 102);
        assert_eq!(derived_clip_seed(100, 2, 3, 1), 107);
    }
}
