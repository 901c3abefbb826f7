//! Multimodal condition encoding: class label, descriptive text, image prior,
//! and motion fields, plus decoupled cross-attention and the condition-drop
//! strategy used for joint training.
//!
//! Null forms: a missing class label maps to a learned null embedding
//! (zero-initialized), missing text to a learned null token, a missing image
//! prior to the zero feature, and missing motion to the zero field. The null
//! forms are additive identities at initialization, which makes the
//! unconditional branch of classifier-free guidance exact when training
//! starts.

use crate::autodiff::{attention, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Embedding, ParamRegistry, Projection};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Maximum descriptive-text length in tokens.
pub const MAX_TEXT_LEN: usize = 16;

/// Per-pixel displacement between two adjacent frames, in pixels per frame
/// step. `dy`/`dx` are each H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub dy: Tensor<f32>,
    pub dx: Tensor<f32>,
}

impl MotionField {
    pub fn zeros(h: usize, w: usize) -> Self {
        MotionField { dy: Tensor::zeros(&[h, w]), dx: Tensor::zeros(&[h, w]) }
    }

    pub fn height(&self) -> usize {
        self.dy.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.dy.shape()[1]
    }
}

/// The control signals guiding one generation group. Any subset may be
/// present; a fully empty bank drives unconditional generation.
#[derive(Debug, Clone, Default)]
pub struct ConditionsBank {
    pub class_label: Option<usize>,
    pub text: Option<Vec<usize>>,
    pub image_prior: Option<Tensor<f32>>,
    pub motion_fields: Option<Vec<MotionField>>,
}

impl ConditionsBank {
    pub fn empty() -> Self {
        ConditionsBank::default()
    }

    pub fn is_fully_null(&self) -> bool {
        self.class_label.is_none()
            && self.text.is_none()
            && self.image_prior.is_none()
            && self.motion_fields.is_none()
    }

    /// Check internal consistency for an F-frame clip.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if let Some(text) = &self.text {
            if text.len() > MAX_TEXT_LEN {
                return Err(Error::input(format!(
                    "text length {} exceeds maximum {MAX_TEXT_LEN}",
                    text.len()
                )));
            }
        }
        if let Some(fields) = &self.motion_fields {
            if fields.len() + 1 != frames {
                return Err(Error::input(format!(
                    "motion fields count {} does not match F-1={} for F={frames}",
                    fields.len(),
                    frames - 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-condition drop probabilities for the joint-training strategy, plus the
/// probability of dropping every condition simultaneously.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropProbabilities {
    pub class_label: f64,
    pub text: f64,
    pub image_prior: f64,
    pub motion: f64,
    pub all: f64,
}

impl Default for DropProbabilities {
    fn default() -> Self {
        DropProbabilities { class_label: 0.1, text: 0.1, image_prior: 0.1, motion: 0.1, all: 0.1 }
    }
}

impl DropProbabilities {
    pub fn none() -> Self {
        DropProbabilities { class_label: 0.0, text: 0.0, image_prior: 0.0, motion: 0.0, all: 0.0 }
    }
}

/// Replace present conditions by their null forms with the configured
/// probabilities. The clip payload is never touched, only the bank.
///
/// Draw order is fixed (all-drop, class, text, image, motion) and every draw
/// is consumed regardless of which conditions are present, so the mask for a
/// given `rng` state does not depend on the bank contents.
pub fn drop_conditions(
    bank: &ConditionsBank,
    rng: &mut Rng,
    probs: &DropProbabilities,
) -> ConditionsBank {
    let drop_all = rng.coin(probs.all);
    let drop_class = rng.coin(probs.class_label);
    let drop_text = rng.coin(probs.text);
    let drop_image = rng.coin(probs.image_prior);
    let drop_motion = rng.coin(probs.motion);
    if drop_all {
        return ConditionsBank::empty();
    }
    ConditionsBank {
        class_label: if drop_class { None } else { bank.class_label },
        text: if drop_text { None } else { bank.text.clone() },
        image_prior: if drop_image { None } else { bank.image_prior.clone() },
        motion_fields: if drop_motion { None } else { bank.motion_fields.clone() },
    }
}

/// Class-label encoder: a discretization (table lookup) plus embedding layer.
/// Row `num_classes` is the learned null embedding, zero-initialized so a
/// null label is an additive identity on the timestep embedding.
pub struct ClassEmbedding<T: Real = f32> {
    pub table: Embedding<T>,
    pub num_classes: usize,
}

impl<T: Real> ClassEmbedding<T> {
    pub fn new(num_classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let emb = Embedding::new(num_classes + 1, dim, rng);
        // Zero the null row.
        emb.table.update_value(|t| {
            let d = t.shape()[1];
            for j in 0..d {
                t.data_mut()[num_classes * d + j] = T::zero();
            }
        });
        ClassEmbedding { table: emb, num_classes }
    }

    fn id_for(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(self.num_classes),
            Some(l) if l < self.num_classes => Ok(l),
            Some(l) => Err(Error::input(format!(
                "class label {l} out of range [0, {})",
                self.num_classes
            ))),
        }
    }

    /// t_emb + E[label] for a single sample; `t_emb` is (1 x d).
    pub fn encode(&self, label: Option<usize>, t_emb: &Var<T>) -> Result<Var<T>> {
        let id = self.id_for(label)?;
        Ok(t_emb.add(&self.table.forward(&[id])))
    }

    /// Batched version: one label per row of `t_emb` (B x d).
    pub fn encode_batch(&self, labels: &[Option<usize>], t_emb: &Var<T>) -> Result<Var<T>> {
        let ids = labels.iter().map(|&l| self.id_for(l)).collect::<Result<Vec<_>>>()?;
        Ok(t_emb.add(&self.table.forward(&ids)))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.table.register(&format!("{prefix}.class"), reg);
    }
}

/// Token + positional embedding text encoder with a learned null token for
/// the empty prompt.
pub struct TextEncoder<T: Real = f32> {
    pub tokens: Embedding<T>,
    pub positions: Embedding<T>,
    pub null_token: Var<T>,
    pub vocab_size: usize,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        TextEncoder {
            tokens: Embedding::new(vocab_size, dim, rng),
            positions: Embedding::new(MAX_TEXT_LEN, dim, rng),
            null_token: Var::param(Tensor::randn(&[1, dim], rng).scale(T::from_f64(0.02))),
            vocab_size,
        }
    }

    /// (L x d) token features; `None` or the empty sequence yields the single
    /// learned null-text embedding (1 x d).
    pub fn encode(&self, text: Option<&[usize]>) -> Result<Var<T>> {
        let tokens = match text {
            None => return Ok(self.null_token.clone()),
            Some(t) if t.is_empty() => return Ok(self.null_token.clone()),
            Some(t) => t,
        };
        if tokens.len() > MAX_TEXT_LEN {
            return Err(Error::input(format!("text length {} exceeds {MAX_TEXT_LEN}", tokens.len())));
        }
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::input(format!(
                    "unknown token id {t} (vocabulary size {})",
                    self.vocab_size
                )));
            }
        }
        let pos_ids: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.tokens.forward(tokens).add(&self.positions.forward(&pos_ids)))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.tokens.register(&format!("{prefix}.tokens"), reg);
        self.positions.register(&format!("{prefix}.positions"), reg);
        reg.add(format!("{prefix}.null_token"), &self.null_token);
    }
}

/// Strided convolutional image-prior encoder producing patch tokens aligned
/// to the text embedding dimension. One stride-2 conv per factor of 2 in
/// `rate`, with SiLU between layers (not after the last).
pub struct ImagePriorEncoder<T: Real = f32> {
    pub convs: Vec<Conv2dLayer<T>>,
    pub channels: usize,
    pub image_size: usize,
    pub dim: usize,
    pub rate: usize,
}

impl<T: Real> ImagePriorEncoder<T> {
    pub fn new(channels: usize, image_size: usize, dim: usize, rate: usize, rng: &mut Rng) -> Result<Self> {
        if !rate.is_power_of_two() || rate < 2 {
            return Err(Error::config(format!("image prior rate {rate} must be a power of two >= 2")));
        }
        if image_size % rate != 0 {
            return Err(Error::config(format!("image size {image_size} not divisible by rate {rate}")));
        }
        let n_layers = rate.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n_layers);
        let mut in_ch = channels;
        for i in 0..n_layers {
            let out_ch = if i + 1 == n_layers { dim } else { (16 << i).min(dim) };
            convs.push(Conv2dLayer::new(in_ch, out_ch, 3, (2, 2), (1, 1), rng));
            in_ch = out_ch;
        }
        Ok(ImagePriorEncoder { convs, channels, image_size, dim, rate })
    }

    /// (L_i x d) patch tokens; `None` yields the zero feature (1 x d).
    pub fn encode(&self, frame: Option<&Tensor<T>>) -> Result<Var<T>> {
        let Some(frame) = frame else {
            return Ok(Var::constant(Tensor::zeros(&[1, self.dim])));
        };
        if frame.shape() != [self.channels, self.image_size, self.image_size] {
            return Err(Error::input(format!(
                "image prior shape {:?} does not match configured {:?}",
                frame.shape(),
                [self.channels, self.image_size, self.image_size]
            )));
        }
        let mut h = Var::constant(
            frame.reshape(&[1, self.channels, self.image_size, self.image_size])?,
        );
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = h.silu();
            }
            h = conv.forward(&h);
        }
        let shape = h.shape();
        let (d, gh, gw) = (shape[1], shape[2], shape[3]);
        // (1, d, gh, gw) -> (gh*gw, d)
        Ok(h.permute(&[0, 2, 3, 1]).reshape(&[gh * gw, d]))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.register(&format!("{prefix}.conv{i}"), reg);
        }
    }
}

/// Convolutional motion encoder. Fields are encoded per transition and the
/// final temporal slot (no successor frame) is identically zero, so a clip of
/// F frames yields F feature maps at the latent resolution.
pub struct MotionEncoder<T: Real = f32> {
    pub convs: Vec<Conv2dLayer<T>>,
    pub out_channels: usize,
    pub rate: usize,
}

impl<T: Real> MotionEncoder<T> {
    pub fn new(out_channels: usize, rate: usize, rng: &mut Rng) -> Result<Self> {
        if !rate.is_power_of_two() || rate < 2 {
            return Err(Error::config(format!("motion encoder rate {rate} must be a power of two >= 2")));
        }
        let n_layers = rate.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n_layers);
        let mut in_ch = 2;
        for i in 0..n_layers {
            let out_ch = if i + 1 == n_layers { out_channels } else { 8 };
            convs.push(Conv2dLayer::new(in_ch, out_ch, 3, (2, 2), (1, 1), rng));
            in_ch = out_ch;
        }
        Ok(MotionEncoder { convs, out_channels, rate })
    }

    /// Encode F-1 fields into an (F x c_m x h x w) feature stack; the last
    /// slot is zero.
    pub fn encode(&self, fields: &[MotionField]) -> Result<Var<T>> {
        if fields.is_empty() {
            return Err(Error::input("motion encoder requires at least one field"));
        }
        let (h, w) = (fields[0].height(), fields[0].width());
        if h % self.rate != 0 || w % self.rate != 0 {
            return Err(Error::input(format!(
                "field size {h}x{w} not divisible by rate {}",
                self.rate
            )));
        }
        let mut slots = Vec::with_capacity(fields.len() + 1);
        for field in fields {
            let mut stacked = Tensor::<T>::zeros(&[1, 2, h, w]);
            for (i, &v) in field.dy.data().iter().enumerate() {
                stacked.data_mut()[i] = T::from_f64(v as f64);
            }
            for (i, &v) in field.dx.data().iter().enumerate() {
                stacked.data_mut()[h * w + i] = T::from_f64(v as f64);
            }
            let mut hvar = Var::constant(stacked);
            for (i, conv) in self.convs.iter().enumerate() {
                if i > 0 {
                    hvar = hvar.silu();
                }
                hvar = conv.forward(&hvar);
            }
            slots.push(hvar);
        }
        let last_shape = slots[0].shape();
        slots.push(Var::constant(Tensor::zeros(&last_shape)));
        Ok(Var::concat(&slots, 0))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.register(&format!("{prefix}.conv{i}"), reg);
        }
    }
}

/// Decoupled cross-attention: text and image-prior streams attended in
/// parallel with separate projections, merged by addition. Query projections
/// both read the latent tokens. The image-stream output projection is
/// zero-initialized so the block reproduces text-only cross-attention at
/// initialization.
pub struct DecoupledCrossAttention<T: Real = f32> {
    pub q_text: Projection<T>,
    pub k_text: Projection<T>,
    pub v_text: Projection<T>,
    pub o_text: Projection<T>,
    pub q_image: Projection<T>,
    pub k_image: Projection<T>,
    pub v_image: Projection<T>,
    pub o_image: Projection<T>,
}

impl<T: Real> DecoupledCrossAttention<T> {
    pub fn new(query_dim: usize, context_dim: usize, rng: &mut Rng) -> Self {
        DecoupledCrossAttention {
            q_text: Projection::new(query_dim, query_dim, rng),
            k_text: Projection::new(context_dim, query_dim, rng),
            v_text: Projection::new(context_dim, query_dim, rng),
            o_text: Projection::new(query_dim, query_dim, rng),
            q_image: Projection::new(query_dim, query_dim, rng),
            k_image: Projection::new(context_dim, query_dim, rng),
            v_image: Projection::new(context_dim, query_dim, rng),
            o_image: Projection::zeros(query_dim, query_dim),
        }
    }

    /// z: (n x d) latent tokens, f_t: (L_t x d_ctx), f_i: (L_i x d_ctx).
    pub fn forward(&self, z: &Var<T>, f_t: &Var<T>, f_i: &Var<T>) -> Var<T> {
        let text = attention(&self.q_text.forward(z), &self.k_text.forward(f_t), &self.v_text.forward(f_t));
        let image =
            attention(&self.q_image.forward(z), &self.k_image.forward(f_i), &self.v_image.forward(f_i));
        self.o_text.forward(&text).add(&self.o_image.forward(&image))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.q_text.register(&format!("{prefix}.q_text"), reg);
        self.k_text.register(&format!("{prefix}.k_text"), reg);
        self.v_text.register(&format!("{prefix}.v_text"), reg);
        self.o_text.register(&format!("{prefix}.o_text"), reg);
        self.q_image.register(&format!("{prefix}.q_image"), reg);
        self.k_image.register(&format!("{prefix}.k_image"), reg);
        self.v_image.register(&format!("{prefix}.v_image"), reg);
        self.o_image.register(&format!("{prefix}.o_image"), reg);
    }

    /// Query projections of both streams; kept trainable during sequence
    /// finetuning.
    pub fn query_params(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.q_text.register(&format!("{prefix}.q_text"), reg);
        self.q_image.register(&format!("{prefix}.q_image"), reg);
    }
}

/// Exhaustive block-matching motion extraction.
///
/// For each non-overlapping `block` x `block` tile of frame f, finds the
/// integer displacement (dy, dx) in [-radius, radius]^2 minimizing the sum of
/// absolute differences against frame f+1. Candidates that move the block out
/// of bounds are skipped ((0,0) is always valid). Ties break to the smallest
/// squared norm, then lexicographically by (dy, dx). The winning displacement
/// is broadcast to the tile's pixels.
pub fn extract_motion_field(
    pixels: &Tensor<f32>,
    block: usize,
    radius: usize,
) -> Result<Vec<MotionField>> {
    if pixels.rank() != 4 {
        return Err(Error::input("extract_motion_field expects (F,C,H,W) pixels"));
    }
    let (f, c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2], pixels.shape()[3]);
    if f < 2 {
        return Err(Error::input(format!("extract_motion_field requires F >= 2, got {f}")));
    }
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::input(format!("block {block} must divide H={h} and W={w}")));
    }
    let r = radius as isize;
    let data = pixels.data();
    let frame_stride = c * h * w;

    let sad = |f0: usize, y0: usize, x0: usize, dy: isize, dx: isize| -> f64 {
        let mut acc = 0.0f64;
        for ci in 0..c {
            for by in 0..block {
                let ya = y0 + by;
                let yb = (ya as isize + dy) as usize;
                let row_a = f0 * frame_stride + (ci * h + ya) * w + x0;
                let row_b = (f0 + 1) * frame_stride + (ci * h + yb) * w;
                for bx in 0..block {
                    let xb = ((x0 + bx) as isize + dx) as usize;
                    acc += (data[row_a + bx] - data[row_b + xb]).abs() as f64;
                }
            }
        }
        acc
    };

    let mut fields = Vec::with_capacity(f - 1);
    for f0 in 0..f - 1 {
        let mut field = MotionField::zeros(h, w);
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let mut best = (0isize, 0isize);
                let mut best_sad = f64::INFINITY;
                let mut best_norm = i64::MAX;
                for dy in -r..=r {
                    let ty = by as isize + dy;
                    if ty < 0 || ty + block as isize > h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let tx = bx as isize + dx;
                        if tx < 0 || tx + block as isize > w as isize {
                            continue;
                        }
                        let s = sad(f0, by, bx, dy, dx);
                        let norm = (dy * dy + dx * dx) as i64;
                        let better = s < best_sad
                            || (s == best_sad && norm < best_norm)
                            || (s == best_sad && norm == best_norm && (dy, dx) < best);
                        if better {
                            best_sad = s;
                            best_norm = norm;
                            best = (dy, dx);
                        }
                    }
                }
                for py in by..by + block {
                    for px in bx..bx + block {
                        field.dy.data_mut()[py * w + px] = best.0 as f32;
                        field.dx.data_mut()[py * w + px] = best.1 as f32;
                    }
                }
            }
        }
        fields.push(field);
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn rng() -> Rng {
        RngState::new(42, 1).rng()
    }

    #[test]
    fn null_class_label_is_identity() {
        let mut r = rng();
        let enc = ClassEmbedding::<f32>::new(3, 8, &mut r);
        let t_emb = Var::constant(Tensor::randn(&[1, 8], &mut r));
        let out = enc.encode(None, &t_emb).unwrap();
        assert_eq!(out.value(), t_emb.value());
    }

    #[test]
    fn distinct_labels_give_distinct_embeddings() {
        let mut r = rng();
        let enc = ClassEmbedding::<f32>::new(3, 8, &mut r);
        let t_emb = Var::constant(Tensor::zeros(&[1, 8]));
        let a = enc.encode(Some(0), &t_emb).unwrap().value();
        let b = enc.encode(Some(1), &t_emb).unwrap().value();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn class_label_table_lookup() {
        let mut r = rng();
        let enc = ClassEmbedding::<f32>::new(3, 5, &mut r);
        // Rows = one-hot * 0.1.
        enc.table.table.update_value(|t| {
            for v in t.data_mut().iter_mut() {
                *v = 0.0;
            }
            for i in 0..3 {
                t.data_mut()[i * 5 + i] = 0.1;
            }
        });
        let t_emb = Var::constant(Tensor::zeros(&[1, 5]));
        let out = enc.encode(Some(2), &t_emb).unwrap().value();
        assert_eq!(out.data(), &[0.0, 0.0, 0.1, 0.0, 0.0]);
    }

    #[test]
    fn class_label_out_of_range_errors() {
        let mut r = rng();
        let enc = ClassEmbedding::<f32>::new(3, 4, &mut r);
        let t_emb = Var::constant(Tensor::zeros(&[1, 4]));
        assert!(enc.encode(Some(3), &t_emb).is_err());
    }

    #[test]
    fn empty_text_gives_null_embedding() {
        let mut r = rng();
        let enc = TextEncoder::<f32>::new(10, 6, &mut r);
        let out = enc.encode(Some(&[])).unwrap();
        assert_eq!(out.value(), enc.null_token.value());
        let out = enc.encode(None).unwrap();
        assert_eq!(out.value(), enc.null_token.value());
    }

    #[test]
    fn repeated_token_differs_only_by_position() {
        let mut r = rng();
        let enc = TextEncoder::<f32>::new(10, 6, &mut r);
        let out = enc.encode(Some(&[4, 4])).unwrap().value();
        let tok = enc.tokens.table.value();
        let pos = enc.positions.table.value();
        for j in 0..6 {
            let want0 = tok.data()[4 * 6 + j] + pos.data()[j];
            let want1 = tok.data()[4 * 6 + j] + pos.data()[6 + j];
            assert!((out.data()[j] - want0).abs() < 1e-6);
            assert!((out.data()[6 + j] - want1).abs() < 1e-6);
        }
    }

    #[test]
    fn text_exact_table_sums() {
        let mut r = rng();
        let enc = TextEncoder::<f32>::new(10, 4, &mut r);
        enc.tokens.table.update_value(|t| {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = i as f32 * 0.01;
            }
        });
        enc.positions.table.update_value(|t| {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 1.0 + i as f32;
            }
        });
        let out = enc.encode(Some(&[3, 7])).unwrap().value();
        for j in 0..4 {
            assert!((out.data()[j] - ((3 * 4 + j) as f32 * 0.01 + (1 + j) as f32)).abs() < 1e-5);
            assert!(
                (out.data()[4 + j] - ((7 * 4 + j) as f32 * 0.01 + (5 + j) as f32)).abs() < 1e-5
            );
        }
    }

    #[test]
    fn unknown_token_errors() {
        let mut r = rng();
        let enc = TextEncoder::<f32>::new(10, 4, &mut r);
        assert!(enc.encode(Some(&[10])).is_err());
    }

    #[test]
    fn zero_frame_zero_bias_encoder_gives_zero_tokens() {
        let mut r = rng();
        let enc = ImagePriorEncoder::<f32>::new(1, 16, 8, 4, &mut r).unwrap();
        for conv in &enc.convs {
            conv.bias.set_value(Tensor::zeros(&conv.bias.shape()));
        }
        let frame = Tensor::zeros(&[1, 16, 16]);
        let out = enc.encode(Some(&frame)).unwrap().value();
        assert_eq!(out.shape(), &[16, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_image_prior_is_zero_feature() {
        let mut r = rng();
        let enc = ImagePriorEncoder::<f32>::new(1, 16, 8, 4, &mut r).unwrap();
        let out = enc.encode(None).unwrap().value();
        assert_eq!(out.shape(), &[1, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_prior_locality() {
        let mut r = rng();
        let enc = ImagePriorEncoder::<f32>::new(1, 32, 8, 8, &mut r).unwrap();
        let base = Tensor::zeros(&[1, 32, 32]);
        let mut bumped = base.clone();
        bumped.data_mut()[0] = 1.0; // top-left pixel
        let a = enc.encode(Some(&base)).unwrap().value();
        let b = enc.encode(Some(&bumped)).unwrap().value();
        // Tokens form a 4x4 grid; the bottom-right token's receptive field
        // cannot reach the top-left pixel.
        let d = 8;
        let far = 15;
        for j in 0..d {
            assert_eq!(a.data()[far * d + j], b.data()[far * d + j]);
        }
        // The top-left token must change.
        let mut changed = false;
        for j in 0..d {
            changed |= a.data()[j] != b.data()[j];
        }
        assert!(changed);
    }

    #[test]
    fn delta_kernel_encoder_samples_strided_grid() {
        // Rate 2 -> a single stride-2 conv; with a centered delta kernel the
        // tokens are exactly the even-position samples of the input.
        let mut r = rng();
        let enc = ImagePriorEncoder::<f32>::new(1, 8, 1, 2, &mut r).unwrap();
        enc.convs[0].weight.set_value({
            let mut w = Tensor::zeros(&[1, 1, 3, 3]);
            w.data_mut()[4] = 1.0;
            w
        });
        enc.convs[0].bias.set_value(Tensor::zeros(&[1]));
        let frame = Tensor::from_fn(&[1, 8, 8], |i| i as f32);
        let out = enc.encode(Some(&frame)).unwrap().value();
        assert_eq!(out.shape(), &[16, 1]);
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(out.data()[gy * 4 + gx], (2 * gy * 8 + 2 * gx) as f32);
            }
        }
    }

    #[test]
    fn image_prior_shape_mismatch_errors() {
        let mut r = rng();
        let enc = ImagePriorEncoder::<f32>::new(1, 16, 8, 4, &mut r).unwrap();
        let frame = Tensor::zeros(&[1, 8, 8]);
        assert!(enc.encode(Some(&frame)).is_err());
    }

    #[test]
    fn motion_encoder_last_slot_zero() {
        let mut r = rng();
        let enc = MotionEncoder::<f32>::new(4, 4, &mut r).unwrap();
        let fields: Vec<MotionField> = (0..3)
            .map(|i| {
                let mut f = MotionField::zeros(16, 16);
                f.dx.data_mut().fill(i as f32);
                f
            })
            .collect();
        let out = enc.encode(&fields).unwrap().value();
        assert_eq!(out.shape(), &[4, 4, 4, 4]);
        let slot = 4 * 4 * 4;
        assert!(out.data()[3 * slot..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_encoder_zero_fields_zero_bias_gives_zero() {
        let mut r = rng();
        let enc = MotionEncoder::<f32>::new(4, 4, &mut r).unwrap();
        for conv in &enc.convs {
            conv.bias.set_value(Tensor::zeros(&conv.bias.shape()));
        }
        let fields = vec![MotionField::zeros(16, 16); 3];
        let out = enc.encode(&fields).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoupled_attention_zero_image_value_matches_text_only() {
        let mut r = rng();
        let attn = DecoupledCrossAttention::<f32>::new(6, 6, &mut r);
        attn.v_image.weight.set_value(Tensor::zeros(&[6, 6]));
        let z = Var::constant(Tensor::randn(&[4, 6], &mut r));
        let f_t = Var::constant(Tensor::randn(&[3, 6], &mut r));
        let f_i = Var::constant(Tensor::randn(&[2, 6], &mut r));
        let full = attn.forward(&z, &f_t, &f_i).value();
        let text_only = {
            let t = attention(
                &attn.q_text.forward(&z),
                &attn.k_text.forward(&f_t),
                &attn.v_text.forward(&f_t),
            );
            attn.o_text.forward(&t).value()
        };
        assert!(full.max_abs_diff(&text_only) < 1e-6);
    }

    #[test]
    fn decoupled_attention_zero_init_image_output_is_text_only() {
        // Default construction zero-initializes the image output projection.
        let mut r = rng();
        let attn = DecoupledCrossAttention::<f32>::new(6, 6, &mut r);
        let z = Var::constant(Tensor::randn(&[4, 6], &mut r));
        let f_t = Var::constant(Tensor::randn(&[3, 6], &mut r));
        let f_i = Var::constant(Tensor::randn(&[2, 6], &mut r));
        let full = attn.forward(&z, &f_t, &f_i).value();
        let text_only = {
            let t = attention(
                &attn.q_text.forward(&z),
                &attn.k_text.forward(&f_t),
                &attn.v_text.forward(&f_t),
            );
            attn.o_text.forward(&t).value()
        };
        assert!(full.max_abs_diff(&text_only) < 1e-6);
    }

    #[test]
    fn decoupled_attention_zero_values_give_zero() {
        let mut r = rng();
        let attn = DecoupledCrossAttention::<f32>::new(6, 6, &mut r);
        attn.v_text.weight.set_value(Tensor::zeros(&[6, 6]));
        attn.v_image.weight.set_value(Tensor::zeros(&[6, 6]));
        let z = Var::constant(Tensor::randn(&[4, 6], &mut r));
        let f_t = Var::constant(Tensor::randn(&[1, 6], &mut r));
        let f_i = Var::constant(Tensor::randn(&[1, 6], &mut r));
        let out = attn.forward(&z, &f_t, &f_i).value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoupled_attention_single_token_hand_computed() {
        // One token per stream: softmax over a singleton is 1, so the output
        // is o_t(v_t(f_t)) + o_i(v_i(f_i)) for every query row.
        let mut r = rng();
        let attn = DecoupledCrossAttention::<f32>::new(3, 3, &mut r);
        // Overwrite the zero o_image so the image stream contributes.
        attn.o_image.weight.set_value(Tensor::randn(&[3, 3], &mut r));
        let z = Var::constant(Tensor::randn(&[2, 3], &mut r));
        let f_t = Var::constant(Tensor::randn(&[1, 3], &mut r));
        let f_i = Var::constant(Tensor::randn(&[1, 3], &mut r));
        let out = attn.forward(&z, &f_t, &f_i).value();

        let vt = attn.v_text.forward(&f_t);
        let vi = attn.v_image.forward(&f_i);
        let want =
            attn.o_text.forward(&vt).add(&attn.o_image.forward(&vi)).value();
        for row in 0..2 {
            for j in 0..3 {
                assert!((out.data()[row * 3 + j] - want.data()[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn static_clip_yields_zero_fields() {
        let mut r = rng();
        let frame = Tensor::<f32>::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut r);
        let mut pixels = Tensor::zeros(&[3, 1, 8, 8]);
        for f in 0..3 {
            pixels.data_mut()[f * 64..(f + 1) * 64].copy_from_slice(frame.data());
        }
        let fields = extract_motion_field(&pixels, 4, 2).unwrap();
        assert_eq!(fields.len(), 2);
        for field in &fields {
            assert!(field.dy.data().iter().all(|&v| v == 0.0));
            assert!(field.dx.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn translated_texture_recovers_shift() {
        // Frame 1 = frame 0 shifted right by 2 px on a textured background.
        let h = 16;
        let w = 16;
        let tex = |y: usize, x: usize| -> f32 {
            ((y as f32 * 0.9).sin() + (x as f32 * 1.3).cos() + 2.0) * 0.2
        };
        let mut pixels = Tensor::zeros(&[2, 1, h, w]);
        for y in 0..h {
            for x in 0..w {
                pixels.data_mut()[y * w + x] = tex(y, x);
                // Shift right: frame1(y, x) = frame0(y, x-2).
                let src_x = x as isize - 2;
                let v = if src_x >= 0 { tex(y, src_x as usize) } else { tex(y, 0) };
                pixels.data_mut()[h * w + y * w + x] = v;
            }
        }
        let fields = extract_motion_field(&pixels, 4, 3).unwrap();
        // Interior blocks (not the leftmost column of blocks, which sees the
        // clamped edge) must report (dy, dx) = (0, 2).
        let field = &fields[0];
        for by in 0..h / 4 {
            for bx in 1..(w / 4) - 1 {
                let py = by * 4;
                let px = bx * 4;
                assert_eq!(field.dy.data()[py * w + px], 0.0, "block ({by},{bx})");
                assert_eq!(field.dx.data()[py * w + px], 2.0, "block ({by},{bx})");
            }
        }
    }

    #[test]
    fn noise_fields_bounded_by_radius() {
        let mut r = rng();
        let pixels = Tensor::<f32>::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut r);
        let fields = extract_motion_field(&pixels, 4, 3).unwrap();
        for field in &fields {
            for (&dy, &dx) in field.dy.data().iter().zip(field.dx.data()) {
                assert!(dy.abs() <= 3.0 && dx.abs() <= 3.0);
            }
        }
    }

    #[test]
    fn motion_requires_two_frames() {
        let pixels = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        assert!(extract_motion_field(&pixels, 4, 2).is_err());
    }

    #[test]
    fn drop_nothing_and_drop_all() {
        let mut rng0 = RngState::new(9, 1).rng();
        let bank = ConditionsBank {
            class_label: Some(1),
            text: Some(vec![2, 3]),
            image_prior: Some(Tensor::zeros(&[1, 4, 4])),
            motion_fields: Some(vec![MotionField::zeros(4, 4)]),
        };
        let kept = drop_conditions(&bank, &mut rng0, &DropProbabilities::none());
        assert_eq!(kept.class_label, Some(1));
        assert_eq!(kept.text, Some(vec![2, 3]));
        assert!(kept.image_prior.is_some());
        assert!(kept.motion_fields.is_some());

        let all = DropProbabilities {
            class_label: 1.0,
            text: 1.0,
            image_prior: 1.0,
            motion: 1.0,
            all: 0.0,
        };
        let dropped = drop_conditions(&bank, &mut rng0, &all);
        assert!(dropped.is_fully_null());
    }

    #[test]
    fn drop_mask_replays_with_fixed_seed() {
        let bank = ConditionsBank {
            class_label: Some(0),
            text: Some(vec![1]),
            image_prior: Some(Tensor::zeros(&[1, 4, 4])),
            motion_fields: Some(vec![MotionField::zeros(4, 4)]),
        };
        let probs = DropProbabilities {
            class_label: 0.5,
            text: 0.5,
            image_prior: 0.5,
            motion: 0.5,
            all: 0.1,
        };
        let run = |seed: u64| -> Vec<bool> {
            let mut r = RngState::new(seed, 7).rng();
            (0..16)
                .map(|_| {
                    let b = drop_conditions(&bank, &mut r, &probs);
                    b.class_label.is_some()
                })
                .collect()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn bank_validation() {
        let mut bank = ConditionsBank::empty();
        bank.motion_fields = Some(vec![MotionField::zeros(4, 4); 3]);
        assert!(bank.validate(4).is_ok());
        assert!(bank.validate(5).is_err());
        bank.text = Some(vec![0; 17]);
        assert!(bank.validate(4).is_err());
    }
}
