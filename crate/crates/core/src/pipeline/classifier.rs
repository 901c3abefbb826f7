//! Downstream sequence classifier: a small 3-d CNN trained under one of
//! three paradigms (real only, synthetic pretrain + real finetune, or joint
//! training on an oversampled real/synthetic mix), with the traditional
//! augmentations applied on the fly.

use crate::autodiff::Var;
use crate::diffusion::TrainLogEntry;
use crate::error::{Error, Result};
use crate::filter::ClipScorer;
use crate::nn::{cosine_warmup_lr, AdamW, AdamWConfig, Conv3dLayer, GroupNorm, Linear, ParamRegistry};
use crate::ops::Conv3dSpec;
use crate::rng::{streams, Rng, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::clip::SequenceClip;

/// Traditional augmentation toggles and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness: bool,
    pub brightness_delta: f64,
    pub translate: bool,
    pub translate_px: usize,
    pub gaussian: bool,
    pub gaussian_sigma: f64,
    pub rotation: bool,
    pub rotation_deg: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: true,
            brightness_delta: 0.1,
            translate: true,
            translate_px: 2,
            gaussian: true,
            gaussian_sigma: 0.02,
            rotation: true,
            rotation_deg: 10.0,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub norm_groups: usize,
    pub augment: AugmentConfig,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 {
            return Err(Error::config("classifier expects exactly 3 conv widths"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        for &w in &self.widths[1..] {
            if w % self.norm_groups != 0 {
                return Err(Error::config("norm groups must divide classifier widths"));
            }
        }
        Ok(())
    }
}

/// One of the downstream training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingParadigm {
    Baseline,
    RealFinetune,
    JointTrain,
}

impl std::fmt::Display for TrainingParadigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainingParadigm::Baseline => write!(f, "baseline"),
            TrainingParadigm::RealFinetune => write!(f, "real-finetune"),
            TrainingParadigm::JointTrain => write!(f, "joint-train"),
        }
    }
}

impl std::str::FromStr for TrainingParadigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainingParadigm::Baseline),
            "real-finetune" => Ok(TrainingParadigm::RealFinetune),
            "joint-train" => Ok(TrainingParadigm::JointTrain),
            other => Err(Error::config(format!("unknown paradigm '{other}'"))),
        }
    }
}

/// Three conv3d blocks, global average pooling, and a linear head.
pub struct SequenceClassifier {
    pub config: ClassifierConfig,
    conv1: Conv3dLayer,
    conv2: Conv3dLayer,
    norm2: GroupNorm,
    conv3: Conv3dLayer,
    norm3: GroupNorm,
    head: Linear,
}

impl SequenceClassifier {
    pub fn new(config: ClassifierConfig, rng_state: RngState) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_state.rng();
        let (w0, w1, w2) = (config.widths[0], config.widths[1], config.widths[2]);
        let k = (3, 3, 3);
        let conv1 = Conv3dLayer::new(
            config.in_channels,
            w0,
            k,
            Conv3dSpec { stride: (1, 2, 2), pad: (1, 1, 1) },
            &mut rng,
        );
        let conv2 =
            Conv3dLayer::new(w0, w1, k, Conv3dSpec { stride: (2, 2, 2), pad: (1, 1, 1) }, &mut rng);
        let norm2 = GroupNorm::new(config.norm_groups, w1);
        let conv3 =
            Conv3dLayer::new(w1, w2, k, Conv3dSpec { stride: (2, 2, 2), pad: (1, 1, 1) }, &mut rng);
        let norm3 = GroupNorm::new(config.norm_groups, w2);
        let head = Linear::new(w2, config.num_classes, &mut rng);
        Ok(SequenceClassifier { config, conv1, conv2, norm2, conv3, norm3, head })
    }

    /// Logits for a batch of clips laid out (B, C, F, H, W).
    pub fn forward(&self, x: &Var) -> Var {
        let h = self.conv1.forward(x).silu();
        let h = self.norm2.forward(&self.conv2.forward(&h)).silu();
        let h = self.norm3.forward(&self.conv3.forward(&h)).silu();
        let s = h.shape();
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let pooled = h.reshape(&[b * c, spatial]).mean_rows().reshape(&[b, c]);
        self.head.forward(&pooled)
    }

    pub fn register(&self, reg: &mut ParamRegistry) {
        self.conv1.register("cls.conv1", reg);
        self.conv2.register("cls.conv2", reg);
        self.norm2.register("cls.norm2", reg);
        self.conv3.register("cls.conv3", reg);
        self.norm3.register("cls.norm3", reg);
        self.head.register("cls.head", reg);
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut reg = ParamRegistry::default();
        self.register(&mut reg);
        reg.entries.into_iter().map(|(n, v)| (n, v.value())).collect()
    }

    pub fn load_named(&self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut reg = ParamRegistry::default();
        self.register(&mut reg);
        let map: std::collections::HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, var) in &reg.entries {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::format(format!("missing classifier parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::format(format!("classifier parameter {name} shape mismatch")));
            }
            var.set_value((*t).clone());
        }
        Ok(())
    }

    /// Class probabilities for one clip.
    pub fn predict_proba(&self, clip: &SequenceClip) -> Result<Vec<f64>> {
        let logits = self.class_logits(clip)?;
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }
}

impl ClipScorer for SequenceClassifier {
    fn class_logits(&self, clip: &SequenceClip) -> Result<Vec<f32>> {
        let batch = clips_to_batch(&[clip])?;
        let logits =
            crate::autodiff::no_grad(|| self.forward(&Var::constant(batch)).value());
        Ok(logits.data().to_vec())
    }
}

/// (F,C,H,W) clips to a (B,C,F,H,W) batch.
fn clips_to_batch(clips: &[&SequenceClip]) -> Result<Tensor> {
    let first = clips[0];
    let (f, c, h, w) = (first.frames(), first.channels(), first.height(), first.width());
    let mut out = Tensor::zeros(&[clips.len(), c, f, h, w]);
    for (bi, clip) in clips.iter().enumerate() {
        if clip.pixels.shape() != first.pixels.shape() {
            return Err(Error::shape("inconsistent clip shapes in batch"));
        }
        let transposed = clip.pixels.permute(&[1, 0, 2, 3])?;
        let stride = c * f * h * w;
        out.data_mut()[bi * stride..(bi + 1) * stride].copy_from_slice(transposed.data());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

fn augment_pixels(pixels: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let mut out = pixels.clone();
    let (f, c, h, w) =
        (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2], pixels.shape()[3]);
    if cfg.flip && rng.coin(0.5) {
        let src = out.clone();
        for fi in 0..f {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = src.get4(fi, ci, y, w - 1 - x);
                        out.set4(fi, ci, y, x, v);
                    }
                }
            }
        }
    }
    if cfg.translate && cfg.translate_px > 0 {
        let t = cfg.translate_px as i64;
        let dy = -t + rng.below((2 * t + 1) as usize) as i64;
        let dx = -t + rng.below((2 * t + 1) as usize) as i64;
        if dy != 0 || dx != 0 {
            let src = out.clone();
            for fi in 0..f {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sy = y as i64 - dy;
                            let sx = x as i64 - dx;
                            let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                src.get4(fi, ci, sy as usize, sx as usize)
                            } else {
                                0.0
                            };
                            out.set4(fi, ci, y, x, v);
                        }
                    }
                }
            }
        }
    }
    if cfg.rotation && cfg.rotation_deg > 0.0 {
        let angle = rng.uniform_in(-cfg.rotation_deg, cfg.rotation_deg).to_radians();
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = out.clone();
        for fi in 0..f {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // Inverse-rotate the target pixel into the source.
                        let ry = y as f64 - cy;
                        let rx = x as f64 - cx;
                        let sy = cos * ry + sin * rx + cy;
                        let sx = -sin * ry + cos * rx + cx;
                        let v = bilinear(&src, fi, ci, sy, sx, h, w);
                        out.set4(fi, ci, y, x, v);
                    }
                }
            }
        }
    }
    if cfg.brightness && cfg.brightness_delta > 0.0 {
        let delta = rng.uniform_in(-cfg.brightness_delta, cfg.brightness_delta) as f32;
        for v in out.data_mut() {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
    if cfg.gaussian && cfg.gaussian_sigma > 0.0 {
        for v in out.data_mut() {
            *v = (*v as f64 + cfg.gaussian_sigma * rng.normal()).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn bilinear(src: &Tensor, f: usize, c: usize, y: f64, x: f64, h: usize, w: usize) -> f32 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let v00 = src.get4(f, c, y0, x0);
    let v01 = src.get4(f, c, y0, x1);
    let v10 = src.get4(f, c, y1, x0);
    let v11 = src.get4(f, c, y1, x1);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Oversample `real` with replacement to `target` clips, preserving class
/// proportions within one clip per class (largest-remainder apportionment).
pub fn oversample_real(
    real: &[SequenceClip],
    target: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Vec<SequenceClip> {
    let mut by_class: Vec<Vec<&SequenceClip>> = vec![Vec::new(); num_classes];
    for clip in real {
        by_class[clip.class_id].push(clip);
    }
    let total = real.len() as f64;
    let mut targets: Vec<usize> = Vec::with_capacity(num_classes);
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (class, pool) in by_class.iter().enumerate() {
        let share = target as f64 * pool.len() as f64 / total;
        let floor = share.floor() as usize;
        targets.push(floor);
        assigned += floor;
        remainders.push((class, share - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (class, _) in remainders.into_iter().take(target - assigned) {
        targets[class] += 1;
    }
    let mut out = Vec::with_capacity(target);
    for (class, pool) in by_class.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        for _ in 0..targets[class] {
            out.push(pool[rng.below(pool.len())].clone());
        }
    }
    out
}

fn train_epochs(
    classifier: &SequenceClassifier,
    clips: &[SequenceClip],
    epochs: usize,
    seed_state: RngState,
    log: &mut Vec<TrainLogEntry>,
) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::input("classifier training set is empty"));
    }
    let cfg = &classifier.config;
    let mut reg = ParamRegistry::default();
    classifier.register(&mut reg);
    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * epochs).max(cfg.warmup + 1);
    let mut adam_cfg = AdamWConfig::new(cfg.lr, cfg.warmup, total_steps);
    adam_cfg.weight_decay = cfg.weight_decay;
    let mut opt = AdamW::new(reg.vars(), adam_cfg)?;

    let mut shuffle_rng = seed_state.rng();
    let mut aug_rng = seed_state.child(1).rng();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut step = 0usize;
    for _epoch in 0..epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let augmented: Vec<SequenceClip> = chunk
                .iter()
                .map(|&i| {
                    let mut clip = clips[i].clone();
                    clip.pixels = augment_pixels(&clip.pixels, &cfg.augment, &mut aug_rng);
                    clip
                })
                .collect();
            let refs: Vec<&SequenceClip> = augmented.iter().collect();
            let batch = clips_to_batch(&refs)?;
            let targets: Vec<usize> = augmented.iter().map(|c| c.class_id).collect();
            let logits = classifier.forward(&Var::constant(batch));
            let loss = logits.cross_entropy_logits(&targets);
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::numeric("classifier training loss is not finite"));
            }
            opt.zero_grad();
            loss.backward();
            opt.step(step);
            log.push(TrainLogEntry { step, loss: loss_val, lr: cosine_warmup_lr(&opt.config, step) });
        }
    }
    Ok(())
}

/// Train a classifier under the given paradigm.
///
/// Baseline ignores the synthetic set. Real-finetune pretrains on synthetic
/// clips for `pretrain_epochs`, then finetunes on real clips. Joint-train
/// oversamples real clips (with replacement, seeded) to match the synthetic
/// count and trains on the mixed set; with an empty synthetic set it reduces
/// to the Baseline path bit for bit.
pub fn train_classifier(
    real: &[SequenceClip],
    synthetic: &[SequenceClip],
    paradigm: TrainingParadigm,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(SequenceClassifier, Vec<TrainLogEntry>)> {
    let classifier = SequenceClassifier::new(config.clone(), RngState::new(seed, streams::INIT))?;
    let base = RngState::new(seed, streams::CLASSIFIER);
    let mut log = Vec::new();
    match paradigm {
        TrainingParadigm::Baseline => {
            train_epochs(&classifier, real, config.epochs, base, &mut log)?;
        }
        TrainingParadigm::RealFinetune => {
            if !synthetic.is_empty() {
                train_epochs(&classifier, synthetic, config.pretrain_epochs, base.child(7), &mut log)?;
            }
            train_epochs(&classifier, real, config.epochs, base, &mut log)?;
        }
        TrainingParadigm::JointTrain => {
            if synthetic.is_empty() {
                train_epochs(&classifier, real, config.epochs, base, &mut log)?;
            } else {
                let mut mix_rng = base.child(11).rng();
                let mixed = if real.len() >= synthetic.len() {
                    let mut all = real.to_vec();
                    all.extend_from_slice(synthetic);
                    all
                } else {
                    let mut all = oversample_real(
                        real,
                        synthetic.len(),
                        config.num_classes,
                        &mut mix_rng,
                    );
                    all.extend_from_slice(synthetic);
                    all
                };
                train_epochs(&classifier, &mixed, config.epochs, base, &mut log)?;
            }
        }
    }
    Ok((classifier, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::clip::Source;

    pub(crate) fn tiny_config() -> ClassifierConfig {
        ClassifierConfig {
            num_classes: 2,
            in_channels: 1,
            widths: vec![4, 8, 8],
            epochs: 2,
            pretrain_epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            warmup: 2,
            weight_decay: 0.0,
            norm_groups: 4,
            augment: AugmentConfig {
                brightness: false,
                translate: false,
                gaussian: false,
                rotation: false,
                flip: false,
                ..Default::default()
            },
        }
    }

    fn make_clip(id: &str, class: usize, level: f32) -> SequenceClip {
        let pixels = Tensor::full(&[4, 1, 8, 8], level);
        SequenceClip::new(id, pixels, class, vec![], Source::Real).unwrap()
    }

    fn tiny_set() -> Vec<SequenceClip> {
        (0..8)
            .map(|i| {
                let class = i % 2;
                make_clip(&format!("c{i}"), class, if class == 0 { 0.2 } else { 0.8 })
            })
            .collect()
    }

    #[test]
    fn forward_shape() {
        let cls = SequenceClassifier::new(tiny_config(), RngState::new(1, 1)).unwrap();
        let clips = tiny_set();
        let refs: Vec<&SequenceClip> = clips.iter().take(3).collect();
        let batch = clips_to_batch(&refs).unwrap();
        assert_eq!(batch.shape(), &[3, 1, 4, 8, 8]);
        let out = crate::autodiff::no_grad(|| cls.forward(&Var::constant(batch)).value());
        assert_eq!(out.shape(), &[3, 2]);
    }

    #[test]
    fn learns_trivial_separation() {
        let clips = tiny_set();
        let mut cfg = tiny_config();
        cfg.epochs = 20;
        cfg.lr = 5e-3;
        let (cls, log) =
            train_classifier(&clips, &[], TrainingParadigm::Baseline, &cfg, 3).unwrap();
        assert!(log.last().unwrap().loss < log.first().unwrap().loss);
        for clip in &clips {
            let p = cls.predict_proba(clip).unwrap();
            assert_eq!(
                p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0,
                clip.class_id,
                "misclassified {}",
                clip.id
            );
        }
    }

    #[test]
    fn joint_train_empty_synthetic_equals_baseline() {
        let clips = tiny_set();
        let cfg = tiny_config();
        let (a, _) = train_classifier(&clips, &[], TrainingParadigm::Baseline, &cfg, 9).unwrap();
        let (b, _) = train_classifier(&clips, &[], TrainingParadigm::JointTrain, &cfg, 9).unwrap();
        for ((na, ta), (nb, tb)) in a.snapshot().iter().zip(b.snapshot().iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {na} differs");
            }
        }
    }

    #[test]
    fn training_replays_with_fixed_seed() {
        let clips = tiny_set();
        let cfg = tiny_config();
        let (a, _) = train_classifier(&clips, &[], TrainingParadigm::Baseline, &cfg, 5).unwrap();
        let (b, _) = train_classifier(&clips, &[], TrainingParadigm::Baseline, &cfg, 5).unwrap();
        for ((_, ta), (_, tb)) in a.snapshot().iter().zip(b.snapshot().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let (c, _) = train_classifier(&clips, &[], TrainingParadigm::Baseline, &cfg, 6).unwrap();
        let differs = a
            .snapshot()
            .iter()
            .zip(c.snapshot().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn oversampling_matches_count_and_proportions() {
        let mut real = Vec::new();
        for i in 0..100 {
            real.push(make_clip(&format!("a{i}"), 0, 0.2));
        }
        for i in 0..25 {
            real.push(make_clip(&format!("b{i}"), 1, 0.8));
        }
        let mut rng = RngState::new(4, 1).rng();
        let over = oversample_real(&real, 400, 2, &mut rng);
        assert_eq!(over.len(), 400);
        let c0 = over.iter().filter(|c| c.class_id == 0).count();
        let c1 = over.iter().filter(|c| c.class_id == 1).count();
        // Real proportions are 80% / 20%: 320 / 80 within one clip.
        assert!((c0 as i64 - 320).abs() <= 1, "class 0 count {c0}");
        assert!((c1 as i64 - 80).abs() <= 1, "class 1 count {c1}");
    }

    #[test]
    fn real_finetune_uses_synthetic() {
        let real = tiny_set();
        let synth: Vec<SequenceClip> = (0..4)
            .map(|i| make_clip(&format!("s{i}"), i % 2, if i % 2 == 0 { 0.3 } else { 0.7 }))
            .collect();
        let cfg = tiny_config();
        let (a, log_a) =
            train_classifier(&real, &synth, TrainingParadigm::RealFinetune, &cfg, 9).unwrap();
        let (b, log_b) =
            train_classifier(&real, &[], TrainingParadigm::RealFinetune, &cfg, 9).unwrap();
        assert!(log_a.len() > log_b.len());
        let differs = a
            .snapshot()
            .iter()
            .zip(b.snapshot().iter())
            .any(|((_, ta), (_, tb))| ta.data() != tb.data());
        assert!(differs);
    }

    #[test]
    fn augmentations_preserve_range_and_shape() {
        let mut rng = RngState::new(8, 1).rng();
        let cfg = AugmentConfig::default();
        let pixels = Tensor::<f32>::rand_uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng);
        for _ in 0..10 {
            let out = augment_pixels(&pixels, &cfg, &mut rng);
            assert_eq!(out.shape(), pixels.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn flip_reverses_columns() {
        let mut cfg = AugmentConfig {
            brightness: false,
            translate: false,
            gaussian: false,
            rotation: false,
            flip: true,
            ..Default::default()
        };
        cfg.flip = true;
        let pixels = Tensor::from_fn(&[1, 1, 1, 4], |i| i as f32 / 4.0);
        // Find a seed whose first coin flip is true.
        let mut rng = RngState::new(2, 3).rng();
        let out = augment_pixels(&pixels, &cfg, &mut rng);
        let flipped = out.data() == [0.75, 0.5, 0.25, 0.0];
        let unchanged = out.data() == pixels.data();
        assert!(flipped || unchanged);
    }
}
