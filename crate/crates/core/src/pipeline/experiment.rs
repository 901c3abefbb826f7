//! Experiment orchestration: artifact persistence for every stage, a
//! resumable stage manifest, and the end-to-end driver
//! dataset -> VAE -> image denoiser -> inflation -> sequence finetune ->
//! synthesis -> filter -> classifiers -> evaluation summary.
//!
//! Stages communicate only through on-disk artifacts, so a rerun with the
//! same configuration hash reproduces every output byte for byte (at one
//! thread), and interrupted runs resume at the first incomplete stage.

use crate::conditioning::{extract_motion_field, ConditionsBank, MotionField};
use crate::diffusion::{
    finetune_sequence_ldm, generate_groups, pretrain_image_ldm, vae_train, Autoencoder,
    DenoiserMode, DenoiserModel, NoiseSchedule, TrainLogEntry, UnetConfig,
    VaeConfig,
};
use crate::error::{Error, Result};
use crate::filter::{run_filter_pipeline, FilterCounts, FilterReport, SyntheticGroup};
use crate::io;
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::classifier::{train_classifier, SequenceClassifier, TrainingParadigm};
use super::clip::{SequenceClip, Source};
use super::config::{Config, MotionExtractConfig};
use super::eval::{evaluate, EvalReport};
use super::toydata::{make_toy_dataset, ToyDataset, ToyDatasetSpec, VOCAB};

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub path: String,
    pub class_id: usize,
    pub tokens: Vec<usize>,
    pub source: Source,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: ToyDatasetSpec,
    pub vocab: Vec<String>,
    pub clips: Vec<ClipRecord>,
}

pub fn save_dataset(dataset: &ToyDataset, dir: &Path) -> Result<()> {
    let mut records = Vec::new();
    for (split, clips) in [("train", &dataset.train), ("test", &dataset.test)] {
        for clip in clips {
            let rel = format!("clips/{}.cga", clip.id);
            io::write_tensor(&dir.join(&rel), &clip.pixels)?;
            records.push(ClipRecord {
                id: clip.id.clone(),
                path: rel,
                class_id: clip.class_id,
                tokens: clip.tokens.clone(),
                source: clip.source,
                split: split.to_string(),
            });
        }
    }
    let manifest = DatasetManifest {
        spec: dataset.spec.clone(),
        vocab: VOCAB.iter().map(|s| s.to_string()).collect(),
        clips: records,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<ToyDataset> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in &manifest.clips {
        let pixels = io::read_tensor(&dir.join(&record.path))?;
        let clip = SequenceClip::new(
            record.id.clone(),
            pixels,
            record.class_id,
            record.tokens.clone(),
            record.source,
        )?;
        match record.split.as_str() {
            "train" => train.push(clip),
            "test" => test.push(clip),
            other => return Err(Error::format(format!("unknown split '{other}'"))),
        }
    }
    Ok(ToyDataset { spec: manifest.spec, train, test })
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    latent_scale: f32,
}

pub fn save_vae(vae: &Autoencoder, path: &Path) -> Result<()> {
    let meta = VaeMeta { config: vae.config.clone(), latent_scale: vae.latent_scale };
    let tensors: Vec<(String, Tensor)> = vae.snapshot().into_iter().collect();
    io::write_checkpoint(path, &serde_json::to_string_pretty(&meta).unwrap(), &tensors)
}

pub fn load_vae(path: &Path) -> Result<Autoencoder> {
    let (config_json, tensors) = io::read_checkpoint(path)?;
    let meta: VaeMeta = serde_json::from_str(&config_json)
        .map_err(|e| Error::format(format!("vae checkpoint meta: {e}")))?;
    let mut vae = Autoencoder::new(meta.config, RngState::new(0, streams::INIT))?;
    let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    vae.load_named(&map)?;
    vae.mark_fitted(meta.latent_scale);
    Ok(vae)
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    config: UnetConfig,
    mode: DenoiserMode,
}

pub fn save_denoiser(model: &DenoiserModel, path: &Path) -> Result<()> {
    let meta = DenoiserMeta { config: model.config.clone(), mode: model.mode };
    let tensors: Vec<(String, Tensor)> = model.snapshot().into_iter().collect();
    io::write_checkpoint(path, &serde_json::to_string_pretty(&meta).unwrap(), &tensors)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserModel> {
    let (config_json, tensors) = io::read_checkpoint(path)?;
    let meta: DenoiserMeta = serde_json::from_str(&config_json)
        .map_err(|e| Error::format(format!("denoiser checkpoint meta: {e}")))?;
    let model = match meta.mode {
        DenoiserMode::Image => DenoiserModel::new_image(meta.config, RngState::new(0, streams::INIT))?,
        DenoiserMode::Sequence => {
            DenoiserModel::new_sequence(meta.config, RngState::new(0, streams::INIT))?
        }
    };
    let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    model.load_named(&map, true)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: super::classifier::ClassifierConfig,
}

pub fn save_classifier(classifier: &SequenceClassifier, path: &Path) -> Result<()> {
    let meta = ClassifierMeta { config: classifier.config.clone() };
    io::write_checkpoint(
        path,
        &serde_json::to_string_pretty(&meta).unwrap(),
        &classifier.snapshot(),
    )
}

pub fn load_classifier(path: &Path) -> Result<SequenceClassifier> {
    let (config_json, tensors) = io::read_checkpoint(path)?;
    let meta: ClassifierMeta = serde_json::from_str(&config_json)
        .map_err(|e| Error::format(format!("classifier checkpoint meta: {e}")))?;
    let classifier = SequenceClassifier::new(meta.config, RngState::new(0, streams::INIT))?;
    classifier.load_named(&tensors)?;
    Ok(classifier)
}

// ---------------------------------------------------------------------------
// Conditions banks and synthetic-set persistence
// ---------------------------------------------------------------------------

/// Conditions derived from a real clip: its class, tokens, first frame as
/// image prior, and extracted motion fields.
pub fn bank_for_clip(clip: &SequenceClip, motion: &MotionExtractConfig) -> Result<ConditionsBank> {
    Ok(ConditionsBank {
        class_label: Some(clip.class_id),
        text: Some(clip.tokens.clone()),
        image_prior: Some(clip.frame(0)),
        motion_fields: Some(extract_motion_field(&clip.pixels, motion.block, motion.radius)?),
    })
}

/// One bank per selected real clip, `banks_per_class` per class, cycling
/// through each class's training clips in dataset order.
pub fn build_banks(
    train: &[SequenceClip],
    num_classes: usize,
    banks_per_class: usize,
    motion: &MotionExtractConfig,
) -> Result<Vec<(ConditionsBank, String)>> {
    let mut banks = Vec::new();
    for class in 0..num_classes {
        let pool: Vec<&SequenceClip> = train.iter().filter(|c| c.class_id == class).collect();
        if pool.is_empty() {
            return Err(Error::input(format!("no training clips for class {class}")));
        }
        for i in 0..banks_per_class {
            let clip = pool[i % pool.len()];
            banks.push((bank_for_clip(clip, motion)?, clip.id.clone()));
        }
    }
    Ok(banks)
}

fn fields_to_tensor(fields: &[MotionField]) -> Tensor {
    let (h, w) = (fields[0].height(), fields[0].width());
    let mut out = Tensor::zeros(&[fields.len(), 2, h, w]);
    for (i, f) in fields.iter().enumerate() {
        let base = i * 2 * h * w;
        out.data_mut()[base..base + h * w].copy_from_slice(f.dy.data());
        out.data_mut()[base + h * w..base + 2 * h * w].copy_from_slice(f.dx.data());
    }
    out
}

fn fields_from_tensor(t: &Tensor) -> Result<Vec<MotionField>> {
    if t.rank() != 4 || t.shape()[1] != 2 {
        return Err(Error::format("motion fields tensor must be (F-1,2,H,W)"));
    }
    let (n, h, w) = (t.shape()[0], t.shape()[2], t.shape()[3]);
    let mut fields = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * 2 * h * w;
        let dy = Tensor::new(&[h, w], t.data()[base..base + h * w].to_vec())?;
        let dx = Tensor::new(&[h, w], t.data()[base + h * w..base + 2 * h * w].to_vec())?;
        fields.push(MotionField { dy, dx });
    }
    Ok(fields)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticClipRecord {
    pub id: String,
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: usize,
    pub class_id: usize,
    pub tokens: Vec<usize>,
    pub source_clip: String,
    pub prior_path: Option<String>,
    pub fields_path: Option<String>,
    pub clips: Vec<SyntheticClipRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub groups: Vec<GroupRecord>,
}

pub fn save_synthetic(
    groups: &[SyntheticGroup],
    source_ids: &[String],
    base_seed: u64,
    clips_per_group: usize,
    dir: &Path,
) -> Result<()> {
    let mut records = Vec::new();
    for group in groups {
        let g = group.group_id;
        let prior_path = match &group.bank.image_prior {
            Some(prior) => {
                let rel = format!("banks/prior-g{g:03}.cga");
                io::write_tensor(&dir.join(&rel), prior)?;
                Some(rel)
            }
            None => None,
        };
        let fields_path = match &group.bank.motion_fields {
            Some(fields) if !fields.is_empty() => {
                let rel = format!("banks/fields-g{g:03}.cga");
                io::write_tensor(&dir.join(&rel), &fields_to_tensor(fields))?;
                Some(rel)
            }
            _ => None,
        };
        let mut clip_records = Vec::new();
        for (i, clip) in group.clips.iter().enumerate() {
            let rel = format!("clips/{}.cga", clip.id);
            io::write_tensor(&dir.join(&rel), &clip.pixels)?;
            clip_records.push(SyntheticClipRecord {
                id: clip.id.clone(),
                path: rel,
                seed: crate::diffusion::sampler::derived_clip_seed(base_seed, g, clips_per_group, i),
            });
        }
        records.push(GroupRecord {
            group_id: g,
            class_id: group.bank.class_label.unwrap_or(0),
            tokens: group.bank.text.clone().unwrap_or_default(),
            source_clip: source_ids.get(g).cloned().unwrap_or_default(),
            prior_path,
            fields_path,
            clips: clip_records,
        });
    }
    io::write_json(&dir.join("manifest.json"), &SyntheticManifest { groups: records })
}

pub fn load_synthetic(dir: &Path) -> Result<Vec<SyntheticGroup>> {
    let manifest: SyntheticManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut groups = Vec::new();
    for record in &manifest.groups {
        let image_prior = match &record.prior_path {
            Some(rel) => Some(io::read_tensor(&dir.join(rel))?),
            None => None,
        };
        let motion_fields = match &record.fields_path {
            Some(rel) => Some(fields_from_tensor(&io::read_tensor(&dir.join(rel))?)?),
            None => None,
        };
        let bank = ConditionsBank {
            class_label: Some(record.class_id),
            text: Some(record.tokens.clone()),
            image_prior,
            motion_fields,
        };
        let mut clips = Vec::new();
        for cr in &record.clips {
            let pixels = io::read_tensor(&dir.join(&cr.path))?;
            clips.push(SequenceClip::new(
                cr.id.clone(),
                pixels,
                record.class_id,
                record.tokens.clone(),
                Source::Synthetic,
            )?);
        }
        groups.push(SyntheticGroup { group_id: record.group_id, bank, clips });
    }
    Ok(groups)
}

pub fn flatten_groups(groups: &[SyntheticGroup]) -> Vec<SequenceClip> {
    groups.iter().flat_map(|g| g.clips.iter().cloned()).collect()
}

// ---------------------------------------------------------------------------
// Experiment manifest and summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub done: bool,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

fn stage_done(manifest: &Manifest, root: &Path, name: &str) -> bool {
    manifest
        .stages
        .get(name)
        .map(|s| s.done && s.outputs.iter().all(|o| root.join(o).exists()))
        .unwrap_or(false)
}

fn mark_done(
    manifest: &mut Manifest,
    root: &Path,
    name: &str,
    outputs: Vec<String>,
) -> Result<()> {
    manifest
        .stages
        .insert(name.to_string(), StageRecord { done: true, outputs });
    io::write_json(&root.join("manifest.json"), manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_auroc: Vec<f64>,
    pub median_accuracy: f64,
    pub median_auroc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub seed: u64,
    pub variants: Vec<VariantSummary>,
    pub filter_counts: FilterCounts,
}

impl ExperimentSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    /// Text tables: per-seed values and the median; headline comparisons use
    /// the median.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "experiment summary (config {} seed {})\n",
            self.config_hash, self.seed
        ));
        out.push_str("  accuracy / AUROC per classifier seed, then median\n");
        for v in &self.variants {
            let accs: Vec<String> = v.per_seed_accuracy.iter().map(|a| format!("{a:.2}")).collect();
            let aucs: Vec<String> = v.per_seed_auroc.iter().map(|a| format!("{a:.3}")).collect();
            out.push_str(&format!(
                "  {:<24} acc [{}] median {:.2} | auroc [{}] median {:.3}\n",
                v.variant,
                accs.join(", "),
                v.median_accuracy,
                aucs.join(", "),
                v.median_auroc
            ));
        }
        let c = &self.filter_counts;
        out.push_str(&format!(
            "  filter: {} -> {} -> {} -> {} clips\n",
            c.clips_in, c.clips_stage1, c.clips_stage2, c.clips_stage3
        ));
        out.push_str("  note: headline comparisons use the median over classifier seeds\n");
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Stage drivers (shared by run_experiment and the CLI subcommands)
// ---------------------------------------------------------------------------

pub fn stage_make_dataset(config: &Config, seed: u64, dir: &Path) -> Result<()> {
    let mut spec = config.dataset.clone();
    spec.seed = seed;
    let dataset = make_toy_dataset(&spec)?;
    save_dataset(&dataset, dir)
}

pub fn stage_train_vae(
    config: &Config,
    seed: u64,
    dataset_dir: &Path,
    out_path: &Path,
) -> Result<Vec<TrainLogEntry>> {
    let dataset = load_dataset(dataset_dir)?;
    let frames: Vec<Tensor> = dataset
        .train
        .iter()
        .flat_map(|clip| (0..clip.frames()).map(move |f| clip.frame(f)))
        .collect();
    let (vae, log) = vae_train(&frames, &config.vae, &config.vae_train, seed)?;
    save_vae(&vae, out_path)?;
    Ok(log)
}

/// Per-frame training pairs for image pretraining: every frame of every
/// training clip, conditioned on the clip's class, tokens, and first frame.
fn image_training_pairs(dataset: &ToyDataset) -> Vec<(Tensor, ConditionsBank)> {
    let mut pairs = Vec::new();
    for clip in &dataset.train {
        let prior = clip.frame(0);
        for f in 0..clip.frames() {
            pairs.push((
                clip.frame(f),
                ConditionsBank {
                    class_label: Some(clip.class_id),
                    text: Some(clip.tokens.clone()),
                    image_prior: Some(prior.clone()),
                    motion_fields: None,
                },
            ));
        }
    }
    pairs
}

pub fn stage_pretrain_ldm(
    config: &Config,
    seed: u64,
    dataset_dir: &Path,
    vae_path: &Path,
    out_path: &Path,
) -> Result<Vec<TrainLogEntry>> {
    let dataset = load_dataset(dataset_dir)?;
    let vae = load_vae(vae_path)?;
    let schedule = NoiseSchedule::linear(&config.schedule)?;
    let pairs = image_training_pairs(&dataset);
    let (model, log) =
        pretrain_image_ldm(&pairs, &vae, &config.unet, &schedule, &config.pretrain, seed)?;
    save_denoiser(&model, out_path)?;
    Ok(log)
}

pub fn stage_inflate(seed: u64, image_path: &Path, out_path: &Path) -> Result<()> {
    let image = load_denoiser(image_path)?;
    let seq = image.inflate(RngState::new(seed, streams::INIT).child(1))?;
    save_denoiser(&seq, out_path)
}

pub fn stage_finetune(
    config: &Config,
    seed: u64,
    dataset_dir: &Path,
    vae_path: &Path,
    model_path: &Path,
    out_path: &Path,
) -> Result<Vec<TrainLogEntry>> {
    let dataset = load_dataset(dataset_dir)?;
    let vae = load_vae(vae_path)?;
    let model = load_denoiser(model_path)?;
    let schedule = NoiseSchedule::linear(&config.schedule)?;
    let clips: Vec<(Tensor, ConditionsBank)> = dataset
        .train
        .iter()
        .map(|clip| Ok((clip.pixels.clone(), bank_for_clip(clip, &config.motion)?)))
        .collect::<Result<Vec<_>>>()?;
    let log = finetune_sequence_ldm(&clips, &vae, &model, &schedule, &config.finetune, seed)?;
    save_denoiser(&model, out_path)?;
    Ok(log)
}

pub fn stage_sample(
    config: &Config,
    seed: u64,
    dataset_dir: &Path,
    vae_path: &Path,
    model_path: &Path,
    out_dir: &Path,
    threads: usize,
) -> Result<()> {
    let dataset = load_dataset(dataset_dir)?;
    let vae = load_vae(vae_path)?;
    let model = load_denoiser(model_path)?;
    let schedule = NoiseSchedule::linear(&config.schedule)?;
    let banks_per_class = config.synthesis.clips_per_class / config.synthesis.clips_per_group;
    let banks = build_banks(
        &dataset.train,
        config.dataset.num_classes,
        banks_per_class,
        &config.motion,
    )?;
    let bank_values: Vec<ConditionsBank> = banks.iter().map(|(b, _)| b.clone()).collect();
    let source_ids: Vec<String> = banks.iter().map(|(_, id)| id.clone()).collect();
    let mut sampler_cfg = config.sampler;
    sampler_cfg.seed = seed;
    let groups = generate_groups(
        &model,
        &vae,
        &schedule,
        &bank_values,
        config.synthesis.clips_per_group,
        &sampler_cfg,
        seed,
        threads,
    )?;
    save_synthetic(&groups, &source_ids, seed, config.synthesis.clips_per_group, out_dir)
}

pub fn stage_filter(
    config: &Config,
    seed: u64,
    synthetic_dir: &Path,
    vae_path: &Path,
    classifier_path: &Path,
    out_dir: &Path,
) -> Result<FilterReport> {
    let groups = load_synthetic(synthetic_dir)?;
    let vae = load_vae(vae_path)?;
    let classifier = load_classifier(classifier_path)?;
    let (kept, report) = run_filter_pipeline(
        &groups,
        &classifier,
        &vae,
        &config.filter,
        RngState::new(seed, streams::FILTER),
    )?;
    let source_ids: Vec<String> = kept.iter().map(|_| String::new()).collect();
    save_synthetic(&kept, &source_ids, seed, config.synthesis.clips_per_group, out_dir)?;
    io::write_json(&out_dir.join("report.json"), &report)?;
    io::write_text(&out_dir.join("report.txt"), &report.render_text())?;
    Ok(report)
}

pub fn stage_train_classifier(
    config: &Config,
    seed: u64,
    dataset_dir: &Path,
    synthetic_dir: Option<&Path>,
    paradigm: TrainingParadigm,
    out_path: &Path,
) -> Result<Vec<TrainLogEntry>> {
    let dataset = load_dataset(dataset_dir)?;
    let synthetic = match synthetic_dir {
        Some(dir) => flatten_groups(&load_synthetic(dir)?),
        None => Vec::new(),
    };
    let (classifier, log) =
        train_classifier(&dataset.train, &synthetic, paradigm, &config.classifier, seed)?;
    save_classifier(&classifier, out_path)?;
    Ok(log)
}

pub fn stage_evaluate(
    dataset_dir: &Path,
    classifier_path: &Path,
    seed: u64,
    paradigm: &str,
) -> Result<EvalReport> {
    let dataset = load_dataset(dataset_dir)?;
    let classifier = load_classifier(classifier_path)?;
    evaluate(&classifier, &dataset.test, seed, paradigm)
}

// ---------------------------------------------------------------------------
// End-to-end driver
// ---------------------------------------------------------------------------

pub struct ExperimentPaths {
    pub root: PathBuf,
}

impl ExperimentPaths {
    pub fn new(root: &Path) -> Self {
        ExperimentPaths { root: root.to_path_buf() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn vae(&self) -> PathBuf {
        self.root.join("vae.ckpt")
    }
    pub fn ldm_image(&self) -> PathBuf {
        self.root.join("ldm_image.ckpt")
    }
    pub fn ldm_seq_init(&self) -> PathBuf {
        self.root.join("ldm_seq_init.ckpt")
    }
    pub fn ldm_seq(&self) -> PathBuf {
        self.root.join("ldm_seq.ckpt")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }
    pub fn filtered(&self) -> PathBuf {
        self.root.join("filtered")
    }
    pub fn classifier(&self, variant: &str, seed_index: usize) -> PathBuf {
        self.root.join(format!("classifier-{variant}-s{seed_index}.ckpt"))
    }
    pub fn eval(&self, variant: &str, seed_index: usize) -> PathBuf {
        self.root.join(format!("evals/eval-{variant}-s{seed_index}.json"))
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join(format!("logs/{name}.json"))
    }
}

/// The four classifier variants the experiment trains and evaluates.
const VARIANTS: [(&str, TrainingParadigm, SynthSource); 4] = [
    ("baseline", TrainingParadigm::Baseline, SynthSource::None),
    ("real-finetune", TrainingParadigm::RealFinetune, SynthSource::Filtered),
    ("joint-train", TrainingParadigm::JointTrain, SynthSource::Filtered),
    ("joint-train-unfiltered", TrainingParadigm::JointTrain, SynthSource::Raw),
];

#[derive(Clone, Copy, PartialEq)]
enum SynthSource {
    None,
    Raw,
    Filtered,
}

/// Run the full pipeline into `out`, resuming any completed stages found
/// there. Returns the summary (also written to summary.json / report.txt).
pub fn run_experiment(config: &Config, seed: u64, out: &Path, threads: usize) -> Result<ExperimentSummary> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let paths = ExperimentPaths::new(out);
    let hash = config.hash();

    let manifest_path = out.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let existing: Manifest = io::read_json(&manifest_path)?;
        if existing.config_hash != hash {
            return Err(Error::config(format!(
                "output directory holds an experiment with config hash {} (current {hash}); use a fresh --out",
                existing.config_hash
            )));
        }
        if existing.seed != seed {
            return Err(Error::config(format!(
                "output directory holds an experiment with seed {} (current {seed}); use a fresh --out",
                existing.seed
            )));
        }
        existing
    } else {
        Manifest { config_hash: hash.clone(), seed, stages: BTreeMap::new() }
    };
    io::write_text(&out.join("config.json"), &config.to_json())?;

    if !stage_done(&manifest, out, "dataset") {
        stage_make_dataset(config, seed, &paths.dataset())?;
        mark_done(&mut manifest, out, "dataset", vec!["dataset/manifest.json".into()])?;
    }

    if !stage_done(&manifest, out, "vae") {
        let log = stage_train_vae(config, seed, &paths.dataset(), &paths.vae())?;
        io::write_json(&paths.log("vae"), &log)?;
        mark_done(&mut manifest, out, "vae", vec!["vae.ckpt".into(), "logs/vae.json".into()])?;
    }

    if !stage_done(&manifest, out, "ldm-image") {
        let log = stage_pretrain_ldm(config, seed, &paths.dataset(), &paths.vae(), &paths.ldm_image())?;
        io::write_json(&paths.log("ldm_image"), &log)?;
        mark_done(
            &mut manifest,
            out,
            "ldm-image",
            vec!["ldm_image.ckpt".into(), "logs/ldm_image.json".into()],
        )?;
    }

    if !stage_done(&manifest, out, "inflate") {
        stage_inflate(seed, &paths.ldm_image(), &paths.ldm_seq_init())?;
        mark_done(&mut manifest, out, "inflate", vec!["ldm_seq_init.ckpt".into()])?;
    }

    if !stage_done(&manifest, out, "finetune") {
        let log = stage_finetune(
            config,
            seed,
            &paths.dataset(),
            &paths.vae(),
            &paths.ldm_seq_init(),
            &paths.ldm_seq(),
        )?;
        io::write_json(&paths.log("ldm_seq"), &log)?;
        mark_done(
            &mut manifest,
            out,
            "finetune",
            vec!["ldm_seq.ckpt".into(), "logs/ldm_seq.json".into()],
        )?;
    }

    if !stage_done(&manifest, out, "synthesize") {
        stage_sample(
            config,
            seed,
            &paths.dataset(),
            &paths.vae(),
            &paths.ldm_seq(),
            &paths.synthetic(),
            threads,
        )?;
        mark_done(&mut manifest, out, "synthesize", vec!["synthetic/manifest.json".into()])?;
    }

    // Baseline classifiers come first: the seed-0 baseline also scores the
    // filter's stage 1.
    for s in 0..config.eval_seeds {
        let stage = format!("cls-baseline-s{s}");
        if !stage_done(&manifest, out, &stage) {
            let ckpt = paths.classifier("baseline", s);
            let log = stage_train_classifier(
                config,
                seed + s as u64,
                &paths.dataset(),
                None,
                TrainingParadigm::Baseline,
                &ckpt,
            )?;
            io::write_json(&paths.log(&format!("cls-baseline-s{s}")), &log)?;
            let report = stage_evaluate(&paths.dataset(), &ckpt, seed + s as u64, "baseline")?;
            io::write_json(&paths.eval("baseline", s), &report)?;
            mark_done(
                &mut manifest,
                out,
                &stage,
                vec![
                    format!("classifier-baseline-s{s}.ckpt"),
                    format!("evals/eval-baseline-s{s}.json"),
                ],
            )?;
        }
    }

    if !stage_done(&manifest, out, "filter") {
        stage_filter(
            config,
            seed,
            &paths.synthetic(),
            &paths.vae(),
            &paths.classifier("baseline", 0),
            &paths.filtered(),
        )?;
        mark_done(
            &mut manifest,
            out,
            "filter",
            vec![
                "filtered/manifest.json".into(),
                "filtered/report.json".into(),
                "filtered/report.txt".into(),
            ],
        )?;
    }

    for (variant, paradigm, source) in VARIANTS {
        if paradigm == TrainingParadigm::Baseline {
            continue; // already trained above
        }
        for s in 0..config.eval_seeds {
            let stage = format!("cls-{variant}-s{s}");
            if stage_done(&manifest, out, &stage) {
                continue;
            }
            let synth_dir = match source {
                SynthSource::None => None,
                SynthSource::Raw => Some(paths.synthetic()),
                SynthSource::Filtered => Some(paths.filtered()),
            };
            let ckpt = paths.classifier(variant, s);
            let log = stage_train_classifier(
                config,
                seed + s as u64,
                &paths.dataset(),
                synth_dir.as_deref(),
                paradigm,
                &ckpt,
            )?;
            io::write_json(&paths.log(&format!("cls-{variant}-s{s}")), &log)?;
            let report = stage_evaluate(&paths.dataset(), &ckpt, seed + s as u64, variant)?;
            io::write_json(&paths.eval(variant, s), &report)?;
            mark_done(
                &mut manifest,
                out,
                &stage,
                vec![
                    format!("classifier-{variant}-s{s}.ckpt"),
                    format!("evals/eval-{variant}-s{s}.json"),
                ],
            )?;
        }
    }

    // Summary.
    let filter_report: FilterReport = io::read_json(&paths.filtered().join("report.json"))?;
    let mut variants = Vec::new();
    for (variant, _, _) in VARIANTS {
        let mut accs = Vec::new();
        let mut aucs = Vec::new();
        for s in 0..config.eval_seeds {
            let report: EvalReport = io::read_json(&paths.eval(variant, s))?;
            accs.push(report.accuracy);
            aucs.push(report.auroc_macro);
        }
        variants.push(VariantSummary {
            variant: variant.to_string(),
            median_accuracy: median(&accs),
            median_auroc: median(&aucs),
            per_seed_accuracy: accs,
            per_seed_auroc: aucs,
        });
    }
    let summary = ExperimentSummary {
        config_hash: hash,
        seed,
        variants,
        filter_counts: filter_report.counts,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    io::write_text(&out.join("report.txt"), &summary.render_text())?;
    mark_done(&mut manifest, out, "summary", vec!["summary.json".into(), "report.txt".into()])?;
    Ok(summary)
}
