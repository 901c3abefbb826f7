//! Conditional UNet denoiser.
//!
//! Image mode denoises independent frames; sequence mode adds the temporal
//! machinery: sequential attention in every level block, the key-frame +
//! motion-pathway attention block after the input convolution, and a motion
//! feature pathway joined at the input convolution (mathematically the
//! channel concatenation of motion features with the latents, implemented as
//! a parallel zero-initialized convolution so the image weights stay
//! untouched). All inserted paths are zero-gated, so right after inflation
//! the sequence model reproduces the image model frame by frame.

use crate::autodiff::{no_grad, Var};
use crate::conditioning::{
    ClassEmbedding, ConditionsBank, DecoupledCrossAttention, ImagePriorEncoder, MotionEncoder,
    TextEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2dLayer, GroupNorm, Linear, ParamRegistry};
use crate::rng::{Rng, RngState};
use crate::sam::{zero_fields, SamBlock, SequentialAttention, SpatialSelfAttention};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub pixel_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub time_dim: usize,
    pub context_dim: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub motion_channels: usize,
    pub patch_scale: usize,
    pub frames: usize,
    pub image_size: usize,
    pub prior_rate: usize,
    pub norm_groups: usize,
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::config("channel_mults must be non-empty"));
        }
        if self.image_size % self.patch_scale != 0
            || self.image_size / self.patch_scale != self.latent_size
        {
            return Err(Error::config(format!(
                "patch scale {} must map image {} onto the latent grid {}",
                self.patch_scale, self.image_size, self.latent_size
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even"));
        }
        let levels = self.channel_mults.len();
        if self.latent_size >> (levels - 1) == 0 {
            return Err(Error::config("too many levels for the latent size"));
        }
        for &m in &self.channel_mults {
            if (self.base_width * m) % self.norm_groups != 0 {
                return Err(Error::config("norm groups must divide every level width"));
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| self.base_width * m).collect()
    }
}

/// Whether the denoiser operates on independent frames or coupled sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiserMode {
    Image,
    Sequence,
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2dLayer,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new(in_ch: usize, out_ch: usize, time_dim: usize, groups: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(groups, in_ch),
            conv1: Conv2dLayer::new(in_ch, out_ch, 3, (1, 1), (1, 1), rng),
            emb_proj: Linear::new(time_dim, out_ch, rng),
            norm2: GroupNorm::new(groups, out_ch),
            conv2: Conv2dLayer::new(out_ch, out_ch, 3, (1, 1), (1, 1), rng),
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv2dLayer::new(in_ch, out_ch, 1, (1, 1), (0, 0), rng))
            },
        }
    }

    fn forward(&self, x: &Var, emb: &Var) -> Var {
        let shape = x.shape();
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let hs = h.shape();
        let e = self.emb_proj.forward(&emb.silu());
        let h = h
            .reshape(&[hs[0], hs[1], hs[2] * hs[3]])
            .add_sample_channel(&e)
            .reshape(&hs);
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        let skip = match &self.skip {
            Some(conv) => conv.forward(x),
            None => x.reshape(&shape),
        };
        skip.add(&h)
    }

    fn register(&self, prefix: &str, reg: &mut ParamRegistry) {
        self.norm1.register(&format!("{prefix}.norm1"), reg);
        self.conv1.register(&format!("{prefix}.conv1"), reg);
        self.emb_proj.register(&format!("{prefix}.emb"), reg);
        self.norm2.register(&format!("{prefix}.norm2"), reg);
        self.conv2.register(&format!("{prefix}.conv2"), reg);
        if let Some(skip) = &self.skip {
            skip.register(&format!("{prefix}.skip"), reg);
        }
    }
}

struct LevelBlock {
    res: ResBlock,
    spatial: SpatialSelfAttention,
    cross: DecoupledCrossAttention,
    sa: Option<SequentialAttention>,
}

impl LevelBlock {
    fn new(
        in_ch: usize,
        out_ch: usize,
        config: &UnetConfig,
        sequence: bool,
        rng: &mut Rng,
    ) -> Self {
        LevelBlock {
            res: ResBlock::new(in_ch, out_ch, config.time_dim, config.norm_groups, rng),
            spatial: SpatialSelfAttention::new(out_ch, rng),
            cross: DecoupledCrossAttention::new(out_ch, config.context_dim, rng),
            sa: if sequence { Some(SequentialAttention::new(out_ch, rng)) } else { None },
        }
    }

    fn forward(&self, x: &Var, emb: &Var, contexts: &[(Var, Var)]) -> Var {
        let h = self.res.forward(x, emb);
        let h = self.spatial.forward(&h);
        let h = apply_cross(&self.cross, &h, contexts);
        match &self.sa {
            Some(sa) => sa.forward(&h),
            None => h,
        }
    }

    fn register(&self, prefix: &str, reg: &mut ParamRegistry) {
        self.res.register(&format!("{prefix}.res"), reg);
        self.spatial.register(&format!("{prefix}.spatial"), reg);
        self.cross.register(&format!("{prefix}.cross"), reg);
        if let Some(sa) = &self.sa {
            sa.register(&format!("{prefix}.sa"), reg);
        }
    }
}

/// Residual decoupled cross-attention over (B,C,H,W); `contexts` holds one
/// (text, image) pair per sample, or a single shared pair.
fn apply_cross(cross: &DecoupledCrossAttention, x: &Var, contexts: &[(Var, Var)]) -> Var {
    let shape = x.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let tokens = x.permute(&[0, 2, 3, 1]).reshape(&[b * hw, c]);
    let mut outs = Vec::with_capacity(b);
    for bi in 0..b {
        let rows: Vec<usize> = (bi * hw..(bi + 1) * hw).collect();
        let z = tokens.gather_rows(&rows);
        let (f_t, f_i) = &contexts[bi.min(contexts.len() - 1)];
        outs.push(cross.forward(&z, f_t, f_i));
    }
    let merged = Var::concat(&outs, 0).reshape(&[b, h, w, c]).permute(&[0, 3, 1, 2]);
    x.add(&merged)
}

pub struct DenoiserModel {
    pub config: UnetConfig,
    pub mode: DenoiserMode,
    pub class_emb: ClassEmbedding,
    pub text_enc: TextEncoder,
    pub prior_enc: ImagePriorEncoder,
    time_mlp1: Linear,
    time_mlp2: Linear,
    conv_in: Conv2dLayer,
    down: Vec<LevelBlock>,
    downsample: Vec<Conv2dLayer>,
    mid_res1: ResBlock,
    mid_attn: SpatialSelfAttention,
    mid_res2: ResBlock,
    up: Vec<LevelBlock>,
    upsample: Vec<Conv2dLayer>,
    norm_out: GroupNorm,
    conv_out: Conv2dLayer,
    pub sam: Option<SamBlock>,
    pub motion_enc: Option<MotionEncoder>,
    motion_in: Option<Conv2dLayer>,
}

impl DenoiserModel {
    fn build(config: UnetConfig, mode: DenoiserMode, rng_state: RngState) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_state.rng();
        let widths = config.widths();
        let levels = widths.len();
        let sequence = mode == DenoiserMode::Sequence;

        let class_emb = ClassEmbedding::new(config.num_classes, config.time_dim, &mut rng);
        let text_enc = TextEncoder::new(config.vocab_size, config.context_dim, &mut rng);
        let prior_enc = ImagePriorEncoder::new(
            config.pixel_channels,
            config.image_size,
            config.context_dim,
            config.prior_rate,
            &mut rng,
        )?;

        let time_mlp1 = Linear::new(config.time_dim, config.time_dim, &mut rng);
        let time_mlp2 = Linear::new(config.time_dim, config.time_dim, &mut rng);
        let conv_in =
            Conv2dLayer::new(config.latent_channels, widths[0], 3, (1, 1), (1, 1), &mut rng);

        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::with_capacity(levels - 1);
        for i in 0..levels {
            let in_ch = if i == 0 { widths[0] } else { widths[i - 1] };
            down.push(LevelBlock::new(in_ch, widths[i], &config, sequence, &mut rng));
            if i + 1 < levels {
                downsample.push(Conv2dLayer::new(widths[i], widths[i], 3, (2, 2), (1, 1), &mut rng));
            }
        }
        let top = widths[levels - 1];
        let mid_res1 = ResBlock::new(top, top, config.time_dim, config.norm_groups, &mut rng);
        let mid_attn = SpatialSelfAttention::new(top, &mut rng);
        let mid_res2 = ResBlock::new(top, top, config.time_dim, config.norm_groups, &mut rng);

        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::with_capacity(levels - 1);
        for i in 0..levels {
            let incoming = widths[(i + 1).min(levels - 1)];
            up.push(LevelBlock::new(incoming + widths[i], widths[i], &config, sequence, &mut rng));
            if i > 0 {
                upsample.push(Conv2dLayer::new(widths[i], widths[i], 3, (1, 1), (1, 1), &mut rng));
            }
        }

        let norm_out = GroupNorm::new(config.norm_groups, widths[0]);
        let conv_out = Conv2dLayer::zeros(widths[0], config.latent_channels, 3);

        let (sam, motion_enc, motion_in) = if sequence {
            let sam = SamBlock::new(widths[0], config.patch_scale, &mut rng);
            let enc = MotionEncoder::new(config.motion_channels, config.patch_scale, &mut rng)?;
            let min = Conv2dLayer::zeros(config.motion_channels, widths[0], 3);
            (Some(sam), Some(enc), Some(min))
        } else {
            (None, None, None)
        };

        Ok(DenoiserModel {
            config,
            mode,
            class_emb,
            text_enc,
            prior_enc,
            time_mlp1,
            time_mlp2,
            conv_in,
            down,
            downsample,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            upsample,
            norm_out,
            conv_out,
            sam,
            motion_enc,
            motion_in,
        })
    }

    /// Fresh image-mode model.
    pub fn new_image(config: UnetConfig, rng_state: RngState) -> Result<Self> {
        Self::build(config, DenoiserMode::Image, rng_state)
    }

    /// Fresh sequence-mode model (used by `inflate` and checkpoint loading).
    pub fn new_sequence(config: UnetConfig, rng_state: RngState) -> Result<Self> {
        Self::build(config, DenoiserMode::Sequence, rng_state)
    }

    /// Extend an image model to a sequence model: spatial kernels operate
    /// frame-wise (temporal extent 1), sequential attention layers and the
    /// key-frame/motion block are inserted with zero-initialized output
    /// projections, and the motion pathway joins through a zero convolution.
    /// Key-frame Q/K/V projections start from the first level's spatial
    /// self-attention weights. Per-frame outputs equal the image model's at
    /// initialization.
    pub fn inflate(&self, rng_state: RngState) -> Result<DenoiserModel> {
        if self.mode != DenoiserMode::Image {
            return Err(Error::state("inflate expects an image-mode model"));
        }
        let seq = Self::new_sequence(self.config.clone(), rng_state)?;
        let src = self.snapshot();
        seq.load_named(&src, false)?;
        if let Some(sam) = &seq.sam {
            sam.ka.init_from_spatial(&seq.down[0].spatial);
        }
        Ok(seq)
    }

    /// (B, time_dim) embedding rows for per-sample timesteps and labels.
    fn embed(&self, timesteps: &[usize], labels: &[Option<usize>]) -> Result<Var> {
        let positions: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let sin = Var::constant(sinusoidal_embedding::<f32>(&positions, self.config.time_dim));
        let h = self.time_mlp2.forward(&self.time_mlp1.forward(&sin).silu());
        self.class_emb.encode_batch(labels, &h)
    }

    fn encode_contexts(&self, banks: &[&ConditionsBank]) -> Result<Vec<(Var, Var)>> {
        banks
            .iter()
            .map(|bank| {
                let f_t = self.text_enc.encode(bank.text.as_deref())?;
                let f_i = self.prior_enc.encode(bank.image_prior.as_ref())?;
                Ok((f_t, f_i))
            })
            .collect()
    }

    fn backbone(&self, h0: Var, emb: &Var, contexts: &[(Var, Var)]) -> Var {
        let levels = self.down.len();
        let mut skips = Vec::with_capacity(levels);
        let mut h = h0;
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, emb, contexts);
            skips.push(h.clone());
            if i + 1 < levels {
                h = self.downsample[i].forward(&h);
            }
        }
        h = self.mid_res1.forward(&h, emb);
        h = self.mid_attn.forward(&h);
        h = self.mid_res2.forward(&h, emb);
        for i in (0..levels).rev() {
            h = Var::concat(&[h, skips[i].clone()], 1);
            h = self.up[i].forward(&h, emb, contexts);
            if i > 0 {
                h = self.upsample[i - 1].forward(&h.upsample_nearest_2x());
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }

    fn check_latent(&self, z: &Var) -> Result<()> {
        let s = z.shape();
        if s.len() != 4
            || s[1] != self.config.latent_channels
            || s[2] != self.config.latent_size
            || s[3] != self.config.latent_size
        {
            return Err(Error::shape(format!(
                "expected (B,{},{},{}) latents, got {:?}",
                self.config.latent_channels, self.config.latent_size, self.config.latent_size, s
            )));
        }
        Ok(())
    }

    /// Image-mode noise prediction for a batch of independent frames with
    /// per-sample timesteps and banks (image priors and text only; motion is
    /// a sequence-mode condition).
    pub fn forward_image(
        &self,
        z: &Var,
        timesteps: &[usize],
        banks: &[&ConditionsBank],
    ) -> Result<Var> {
        self.check_latent(z)?;
        let b = z.shape()[0];
        if timesteps.len() != b || banks.len() != b {
            return Err(Error::input("forward_image: batch size mismatch"));
        }
        let labels: Vec<Option<usize>> = banks.iter().map(|bank| bank.class_label).collect();
        let emb = self.embed(timesteps, &labels)?;
        let contexts = self.encode_contexts(banks)?;
        let h = self.conv_in.forward(z);
        Ok(self.backbone(h, &emb, &contexts))
    }

    /// Sequence-mode noise prediction for an (F,c,h,w) latent clip at a
    /// shared timestep. Missing motion degrades to the zero field.
    pub fn forward_sequence(
        &self,
        z: &Var,
        t: usize,
        bank: &ConditionsBank,
        pathway_rng: RngState,
    ) -> Result<Var> {
        if self.mode != DenoiserMode::Sequence {
            return Err(Error::state("forward_sequence on an image-mode model"));
        }
        self.check_latent(z)?;
        let frames = z.shape()[0];
        bank.validate(frames)?;
        let timesteps = vec![t; frames];
        let labels = vec![bank.class_label; frames];
        let emb = self.embed(&timesteps, &labels)?;
        let contexts = self.encode_contexts(&[bank])?;

        let fields = match &bank.motion_fields {
            Some(f) => f.clone(),
            None => zero_fields(frames, self.config.image_size, self.config.image_size),
        };
        let motion_enc = self.motion_enc.as_ref().expect("sequence model has motion encoder");
        let motion_in = self.motion_in.as_ref().expect("sequence model has motion input conv");
        let mut h = self.conv_in.forward(z);
        if frames > 1 {
            let feats = motion_enc.encode(&fields)?;
            h = h.add(&motion_in.forward(&feats));
        }
        let sam = self.sam.as_ref().expect("sequence model has SAM block");
        h = sam.forward(&h, &fields, pathway_rng)?;
        Ok(self.backbone(h, &emb, &contexts))
    }

    /// Inference-mode prediction on plain tensors.
    pub fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        bank: &ConditionsBank,
        pathway_rng: RngState,
    ) -> Result<Tensor> {
        no_grad(|| {
            let z = Var::constant(z_t.clone());
            let out = match self.mode {
                DenoiserMode::Sequence => self.forward_sequence(&z, t, bank, pathway_rng)?,
                DenoiserMode::Image => {
                    let b = z_t.shape()[0];
                    let banks: Vec<&ConditionsBank> = vec![bank; b];
                    self.forward_image(&z, &vec![t; b], &banks)?
                }
            };
            Ok(out.value())
        })
    }

    pub fn named_params(&self) -> ParamRegistry {
        let mut reg = ParamRegistry::default();
        self.class_emb.register("cond", &mut reg);
        self.text_enc.register("cond.text", &mut reg);
        self.prior_enc.register("cond.prior", &mut reg);
        self.time_mlp1.register("time.mlp1", &mut reg);
        self.time_mlp2.register("time.mlp2", &mut reg);
        self.conv_in.register("conv_in", &mut reg);
        for (i, block) in self.down.iter().enumerate() {
            block.register(&format!("down{i}"), &mut reg);
        }
        for (i, conv) in self.downsample.iter().enumerate() {
            conv.register(&format!("downsample{i}"), &mut reg);
        }
        self.mid_res1.register("mid.res1", &mut reg);
        self.mid_attn.register("mid.attn", &mut reg);
        self.mid_res2.register("mid.res2", &mut reg);
        for (i, block) in self.up.iter().enumerate() {
            block.register(&format!("up{i}"), &mut reg);
        }
        for (i, conv) in self.upsample.iter().enumerate() {
            conv.register(&format!("upsample{i}"), &mut reg);
        }
        self.norm_out.register("norm_out", &mut reg);
        self.conv_out.register("conv_out", &mut reg);
        if let Some(sam) = &self.sam {
            sam.register("sam", &mut reg);
        }
        if let Some(enc) = &self.motion_enc {
            enc.register("motion.enc", &mut reg);
        }
        if let Some(conv) = &self.motion_in {
            conv.register("motion.conv_in", &mut reg);
        }
        reg
    }

    /// Parameters updated during sequence finetuning: the key-frame/motion
    /// block, sequential attention layers, the motion pathway, and the
    /// cross-attention query projections. Everything else stays frozen.
    pub fn finetune_trainable(&self) -> ParamRegistry {
        let mut reg = ParamRegistry::default();
        if let Some(sam) = &self.sam {
            sam.register("sam", &mut reg);
        }
        for (i, block) in self.down.iter().enumerate() {
            if let Some(sa) = &block.sa {
                sa.register(&format!("down{i}.sa"), &mut reg);
            }
            block.cross.query_params(&format!("down{i}.cross"), &mut reg);
        }
        for (i, block) in self.up.iter().enumerate() {
            if let Some(sa) = &block.sa {
                sa.register(&format!("up{i}.sa"), &mut reg);
            }
            block.cross.query_params(&format!("up{i}.cross"), &mut reg);
        }
        if let Some(enc) = &self.motion_enc {
            enc.register("motion.enc", &mut reg);
        }
        if let Some(conv) = &self.motion_in {
            conv.register("motion.conv_in", &mut reg);
        }
        reg
    }

    /// Complement of [`Self::finetune_trainable`] in the full parameter set.
    pub fn frozen_params(&self) -> ParamRegistry {
        let trainable: std::collections::HashSet<String> =
            self.finetune_trainable().entries.into_iter().map(|(n, _)| n).collect();
        let mut reg = ParamRegistry::default();
        for (name, var) in self.named_params().entries {
            if !trainable.contains(&name) {
                reg.add(name, &var);
            }
        }
        reg
    }

    pub fn param_count(&self) -> usize {
        self.named_params().count()
    }

    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        self.named_params().entries.into_iter().map(|(n, v)| (n, v.value())).collect()
    }

    /// Load named tensors into this model. With `strict`, every model
    /// parameter must be present; in both modes every provided name must
    /// exist in the model with a matching shape.
    pub fn load_named(&self, map: &HashMap<String, Tensor>, strict: bool) -> Result<()> {
        let reg = self.named_params();
        let mut known = std::collections::HashSet::new();
        for (name, var) in &reg.entries {
            known.insert(name.clone());
            match map.get(name) {
                Some(t) => {
                    if t.shape() != var.shape() {
                        return Err(Error::format(format!(
                            "parameter {name}: shape {:?} does not match model {:?}",
                            t.shape(),
                            var.shape()
                        )));
                    }
                    var.set_value(t.clone());
                }
                None if strict => {
                    return Err(Error::format(format!("missing parameter {name}")));
                }
                None => {}
            }
        }
        for name in map.keys() {
            if !known.contains(name) {
                return Err(Error::format(format!("unknown parameter {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    pub(crate) fn tiny_config() -> UnetConfig {
        UnetConfig {
            latent_channels: 2,
            latent_size: 8,
            pixel_channels: 1,
            base_width: 16,
            channel_mults: vec![1, 2],
            time_dim: 16,
            context_dim: 8,
            num_classes: 3,
            vocab_size: 12,
            motion_channels: 2,
            patch_scale: 4,
            frames: 4,
            image_size: 32,
            prior_rate: 8,
            norm_groups: 4,
        }
    }

    fn bank() -> ConditionsBank {
        ConditionsBank {
            class_label: Some(1),
            text: Some(vec![2, 5]),
            image_prior: Some(Tensor::from_fn(&[1, 32, 32], |i| (i % 7) as f32 * 0.1)),
            motion_fields: None,
        }
    }

    #[test]
    fn image_forward_shapes() {
        let model =
            DenoiserModel::new_image(tiny_config(), RngState::new(1, streams::INIT)).unwrap();
        let mut rng = RngState::new(2, 1).rng();
        let z = Var::constant(Tensor::randn(&[3, 2, 8, 8], &mut rng));
        let b = bank();
        let banks = vec![&b, &b, &b];
        let out = model.forward_image(&z, &[10, 500, 999], &banks).unwrap();
        assert_eq!(out.shape(), vec![3, 2, 8, 8]);
    }

    #[test]
    fn sequence_forward_shapes_and_missing_motion() {
        let image =
            DenoiserModel::new_image(tiny_config(), RngState::new(1, streams::INIT)).unwrap();
        let seq = image.inflate(RngState::new(3, streams::INIT)).unwrap();
        let mut rng = RngState::new(4, 1).rng();
        let z = Var::constant(Tensor::randn(&[4, 2, 8, 8], &mut rng));
        let out = seq.forward_sequence(&z, 100, &bank(), RngState::new(5, 6)).unwrap();
        assert_eq!(out.shape(), vec![4, 2, 8, 8]);
    }

    #[test]
    fn inflation_identity_per_frame() {
        let image =
            DenoiserModel::new_image(tiny_config(), RngState::new(7, streams::INIT)).unwrap();
        let seq = image.inflate(RngState::new(8, streams::INIT)).unwrap();
        let mut rng = RngState::new(9, 1).rng();
        let z = Tensor::randn(&[4, 2, 8, 8], &mut rng);
        let b = bank();
        let seq_out = seq.predict(&z, 42, &b, RngState::new(10, 6)).unwrap();
        let img_out = image.predict(&z, 42, &b, RngState::new(10, 6)).unwrap();
        let diff = seq_out.max_abs_diff(&img_out);
        assert!(diff < 1e-5, "inflation identity violated: {diff}");
    }

    #[test]
    fn inflation_parameter_bookkeeping() {
        let image =
            DenoiserModel::new_image(tiny_config(), RngState::new(7, streams::INIT)).unwrap();
        let seq = image.inflate(RngState::new(8, streams::INIT)).unwrap();
        let img_count = image.param_count();
        let seq_count = seq.param_count();

        let mut extras = 0usize;
        let mut reg = ParamRegistry::default();
        seq.sam.as_ref().unwrap().register("sam", &mut reg);
        extras += reg.count();
        let mut reg = ParamRegistry::default();
        for (i, block) in seq.down.iter().enumerate() {
            if let Some(sa) = &block.sa {
                sa.register(&format!("d{i}"), &mut reg);
            }
        }
        for (i, block) in seq.up.iter().enumerate() {
            if let Some(sa) = &block.sa {
                sa.register(&format!("u{i}"), &mut reg);
            }
        }
        extras += reg.count();
        let mut reg = ParamRegistry::default();
        seq.motion_enc.as_ref().unwrap().register("m", &mut reg);
        seq.motion_in.as_ref().unwrap().register("mi", &mut reg);
        extras += reg.count();

        assert_eq!(seq_count, img_count + extras);
    }

    #[test]
    fn finetune_trainable_is_proper_subset() {
        let image =
            DenoiserModel::new_image(tiny_config(), RngState::new(7, streams::INIT)).unwrap();
        let seq = image.inflate(RngState::new(8, streams::INIT)).unwrap();
        let trainable = seq.finetune_trainable();
        let frozen = seq.frozen_params();
        assert!(trainable.count() > 0);
        assert!(frozen.count() > 0);
        assert_eq!(trainable.count() + frozen.count(), seq.param_count());
        let names: Vec<&str> =
            trainable.entries.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.iter().any(|n| n.starts_with("sam.")));
        assert!(names.iter().any(|n| n.contains(".sa.")));
        assert!(names.iter().any(|n| n.starts_with("motion.")));
        assert!(names.iter().any(|n| n.contains("cross.q_text")));
        assert!(names.iter().any(|n| n.contains("cross.q_image")));
        assert!(!names.iter().any(|n| n.starts_with("conv_in")));
    }

    #[test]
    fn snapshot_roundtrip() {
        let model =
            DenoiserModel::new_image(tiny_config(), RngState::new(11, streams::INIT)).unwrap();
        let snap = model.snapshot();
        let other =
            DenoiserModel::new_image(tiny_config(), RngState::new(12, streams::INIT)).unwrap();
        other.load_named(&snap, true).unwrap();
        let mut rng = RngState::new(13, 1).rng();
        let z = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let b = bank();
        let a = model.predict(&z, 5, &b, RngState::new(1, 1)).unwrap();
        let c = other.predict(&z, 5, &b, RngState::new(1, 1)).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn unconditional_bank_works() {
        let model =
            DenoiserModel::new_image(tiny_config(), RngState::new(11, streams::INIT)).unwrap();
        let mut rng = RngState::new(14, 1).rng();
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let out = model.predict(&z, 1, &ConditionsBank::empty(), RngState::new(1, 1)).unwrap();
        assert!(out.is_finite());
    }
}
