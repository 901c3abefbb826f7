//! Three-stage quality filter for synthetic clips plus the sequence metrics
//! it relies on.
//!
//! Stage 1 drops clips whose cross-entropy under a real-data classifier
//! exceeds their group's mean loss. Stage 2 keeps clips whose cross-frame
//! latent consistency falls between the two middle clusters of a K=4 1-d
//! k-means over all synthetic clips. Stage 3 greedily enforces inter-clip
//! diversity: each group's first clip is admitted unconditionally, every
//! later clip only if its similarity to every previously kept clip stays
//! below the threshold.
//!
//! The stage logic is exposed at value level (losses, consistency values,
//! similarity callback) so it can be driven by hand-built fixtures, with
//! model-level wrappers computing those values from a classifier and an
//! autoencoder.

use crate::conditioning::ConditionsBank;
use crate::error::{Error, Result};
use crate::kmeans::kmeans_1d;
use crate::ops::cosine_similarity;
use crate::pipeline::clip::SequenceClip;
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One conditions bank plus the clips sampled under it.
#[derive(Debug, Clone)]
pub struct SyntheticGroup {
    pub group_id: usize,
    pub bank: ConditionsBank,
    pub clips: Vec<SequenceClip>,
}

impl SyntheticGroup {
    pub fn class_id(&self) -> Option<usize> {
        self.bank.class_label
    }
}

/// Maps a pixel frame (C,H,W) to a flattened latent embedding.
pub trait FrameEncoder {
    fn encode_frame_flat(&self, frame: &Tensor) -> Result<Tensor>;
}

impl FrameEncoder for crate::diffusion::Autoencoder {
    fn encode_frame_flat(&self, frame: &Tensor) -> Result<Tensor> {
        let z = self.encode_frame(frame)?;
        let n = z.numel();
        z.reshape(&[n])
    }
}

/// Produces class logits for a clip; implemented by the downstream
/// classifier.
pub trait ClipScorer {
    fn class_logits(&self, clip: &SequenceClip) -> Result<Vec<f32>>;
}

/// Filter configuration. `stage2_thresholds_from_s1` switches the stage-2
/// threshold set from all synthetic clips (the literal reading) to only the
/// stage-1 survivors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub stage1_enabled: bool,
    pub stage2_enabled: bool,
    pub stage3_enabled: bool,
    pub theta_threshold: f64,
    pub kmeans_k: usize,
    pub stage2_thresholds_from_s1: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            stage1_enabled: true,
            stage2_enabled: true,
            stage3_enabled: true,
            theta_threshold: 98.0,
            kmeans_k: 4,
            stage2_thresholds_from_s1: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipDecision {
    pub id: String,
    pub value: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Group {
    pub group_id: usize,
    pub threshold: f64,
    pub clips: Vec<ClipDecision>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Report {
    pub t_low: f64,
    pub t_high: f64,
    pub values_all: Vec<ClipDecision>,
    pub clips: Vec<ClipDecision>,
    pub disabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Decision {
    pub id: String,
    pub group_id: usize,
    pub first_in_group: bool,
    pub kept: bool,
    pub duplicate_flagged: bool,
    pub pairs: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterCounts {
    pub groups_in: usize,
    pub clips_in: usize,
    pub groups_stage1: usize,
    pub clips_stage1: usize,
    pub groups_stage2: usize,
    pub clips_stage2: usize,
    pub clips_stage3: usize,
}

/// Per-clip outcome across all stages; the machine-readable decisions table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub id: String,
    pub group_id: usize,
    pub class_id: usize,
    pub stage1_kept: Option<bool>,
    pub stage2_kept: Option<bool>,
    pub stage3_kept: Option<bool>,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub counts: FilterCounts,
    pub stage1: Option<Vec<Stage1Group>>,
    pub stage2: Option<Stage2Report>,
    pub stage3: Option<Vec<Stage3Decision>>,
    pub decisions: Vec<ClipOutcome>,
    pub notices: Vec<String>,
}

impl FilterReport {
    /// Human-readable summary.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let c = &self.counts;
        out.push_str("synthetic data filter report\n");
        out.push_str(&format!(
            "  input: {} groups, {} clips\n",
            c.groups_in, c.clips_in
        ));
        out.push_str(&format!(
            "  stage 1 (class semantics): {} groups, {} clips kept\n",
            c.groups_stage1, c.clips_stage1
        ));
        if let Some(s2) = &self.stage2 {
            if s2.disabled {
                out.push_str("  stage 2 (inner-sequence): disabled\n");
            } else {
                out.push_str(&format!(
                    "  stage 2 (inner-sequence): bounds [{:.3}, {:.3}], {} clips kept\n",
                    s2.t_low, s2.t_high, c.clips_stage2
                ));
            }
        } else {
            out.push_str(&format!(
                "  stage 2 (inner-sequence): skipped, {} clips kept\n",
                c.clips_stage2
            ));
        }
        out.push_str(&format!(
            "  stage 3 (inter-sequence): {} clips kept\n",
            c.clips_stage3
        ));
        for notice in &self.notices {
            out.push_str(&format!("  notice: {notice}\n"));
        }
        for d in &self.decisions {
            out.push_str(&format!(
                "  clip {:<16} group {:>3} class {} s1={} s2={} s3={} -> {}\n",
                d.id,
                d.group_id,
                d.class_id,
                fmt_opt(d.stage1_kept),
                fmt_opt(d.stage2_kept),
                fmt_opt(d.stage3_kept),
                if d.kept { "KEPT" } else { "dropped" }
            ));
        }
        out
    }
}

fn fmt_opt(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "keep",
        Some(false) => "drop",
        None => "-",
    }
}

// ---------------------------------------------------------------------------
// Value-level stage logic
// ---------------------------------------------------------------------------

/// Stage 1 on raw per-group losses: keep clip x iff l_x <= mean(group).
/// Returns per-group keep masks and the group thresholds (None for empty
/// groups, which are skipped).
pub fn stage1_keep_masks(losses: &[Vec<f64>]) -> (Vec<Vec<bool>>, Vec<Option<f64>>) {
    let mut masks = Vec::with_capacity(losses.len());
    let mut thresholds = Vec::with_capacity(losses.len());
    for group in losses {
        if group.is_empty() {
            masks.push(Vec::new());
            thresholds.push(None);
            continue;
        }
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        // The comparison is l <= mean; absorb summation rounding so a group
        // of identical losses keeps every clip (no loss strictly exceeds the
        // mean) and the minimum is always kept.
        let tol = mean.abs() * 1e-12 + 1e-12;
        let mask: Vec<bool> = group.iter().map(|&l| l <= mean + tol).collect();
        masks.push(mask);
        thresholds.push(Some(mean));
    }
    (masks, thresholds)
}

/// Outcome of the stage-2 threshold computation.
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub bounds: Option<(f64, f64)>,
    pub kept: Vec<bool>,
    pub disabled: bool,
}

/// Boundary thresholds from K-means over the full value set: clusters are
/// ordered by centroid; the lowest (inconsistent) and highest
/// (over-consistent) clusters are dropped, t_low is the smallest value in
/// the second cluster and t_high the largest in the third. Empty middle
/// clusters fall back to their neighbor and finally to the global extremes,
/// so a degenerate value set keeps everything.
pub fn stage2_bounds(values_all: &[f64], k: usize, rng: RngState) -> Result<(f64, f64)> {
    let result = kmeans_1d(values_all, k, rng)?;
    if k < 4 {
        return Err(Error::config("stage 2 requires K >= 4 clusters"));
    }
    let cluster_values = |idx: usize| -> Vec<f64> {
        values_all
            .iter()
            .zip(&result.assignments)
            .filter(|(_, &a)| a == idx)
            .map(|(&v, _)| v)
            .collect()
    };
    let global_min = values_all.iter().cloned().fold(f64::INFINITY, f64::min);
    let global_max = values_all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c1 = cluster_values(1);
    let c2 = cluster_values(2);
    let t_low = c1
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .min(if c1.is_empty() && !c2.is_empty() {
            c2.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            f64::INFINITY
        });
    let t_low = if t_low.is_finite() { t_low } else { global_min };
    let t_high = c2
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(if c2.is_empty() && !c1.is_empty() {
            c1.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            f64::NEG_INFINITY
        });
    let t_high = if t_high.is_finite() { t_high } else { global_max };
    Ok((t_low, t_high))
}

/// Stage 2 on raw values: thresholds from `values_all`, inclusive keep test
/// on `values_s1`. With fewer than K threshold values the stage is disabled
/// and keeps everything.
pub fn stage2_keep_mask(
    values_all: &[f64],
    values_s1: &[f64],
    k: usize,
    rng: RngState,
) -> Result<Stage2Outcome> {
    if values_all.len() < k {
        return Ok(Stage2Outcome {
            bounds: None,
            kept: vec![true; values_s1.len()],
            disabled: true,
        });
    }
    let (t_low, t_high) = stage2_bounds(values_all, k, rng)?;
    let kept = values_s1.iter().map(|&v| v >= t_low && v <= t_high).collect();
    Ok(Stage2Outcome { bounds: Some((t_low, t_high)), kept, disabled: false })
}

/// Stage 3 greedy diversity selection at value level. `group_sizes` gives
/// the clip count per group (global indices are group-major); `theta(i, j)`
/// returns the similarity between clips i and j. Each group's first clip is
/// admitted unconditionally (flagged when it would have failed the check);
/// later clips require theta < threshold against every kept clip.
pub fn stage3_keep_masks(
    group_sizes: &[usize],
    theta: &mut dyn FnMut(usize, usize) -> f64,
    threshold: f64,
) -> (Vec<Vec<bool>>, Vec<Vec<(usize, f64)>>, Vec<bool>) {
    let mut kept_global: Vec<usize> = Vec::new();
    let mut masks = Vec::with_capacity(group_sizes.len());
    let mut pair_logs: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut duplicate_flags: Vec<bool> = Vec::new();
    let mut base = 0usize;
    for &size in group_sizes {
        let mut mask = Vec::with_capacity(size);
        for local in 0..size {
            let idx = base + local;
            let mut pairs = Vec::new();
            let mut all_below = true;
            for &kept in &kept_global {
                let v = theta(idx, kept);
                pairs.push((kept, v));
                if v >= threshold {
                    all_below = false;
                    // First clips are admitted regardless; later clips can
                    // stop at the first violation.
                    if local != 0 {
                        break;
                    }
                }
            }
            if local == 0 {
                mask.push(true);
                duplicate_flags.push(!all_below);
                kept_global.push(idx);
            } else if all_below {
                mask.push(true);
                kept_global.push(idx);
            } else {
                mask.push(false);
            }
            pair_logs.push(pairs);
        }
        masks.push(mask);
        base += size;
    }
    (masks, pair_logs, duplicate_flags)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Cross-frame latent consistency in percent: 100 times the mean cosine
/// similarity of consecutive frames' flattened latents.
pub fn compute_seq_consistency(clip: &SequenceClip, encoder: &dyn FrameEncoder) -> Result<f64> {
    let f = clip.frames();
    if f < 2 {
        return Err(Error::input(format!("seq consistency requires F >= 2, got {f}")));
    }
    let latents: Vec<Tensor> = (0..f)
        .map(|i| encoder.encode_frame_flat(&clip.frame(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = 0.0f64;
    for w in latents.windows(2) {
        acc += cosine_similarity(&w[0], &w[1])?;
    }
    Ok(100.0 * acc / (f - 1) as f64)
}

/// Inter-clip similarity in percent: 100 times the mean cosine similarity of
/// index-aligned frame latents.
pub fn inter_clip_similarity(
    a: &SequenceClip,
    b: &SequenceClip,
    encoder: &dyn FrameEncoder,
) -> Result<f64> {
    if a.frames() != b.frames() {
        return Err(Error::input(format!(
            "inter-clip similarity requires equal frame counts ({} vs {})",
            a.frames(),
            b.frames()
        )));
    }
    let f = a.frames();
    let mut acc = 0.0f64;
    for i in 0..f {
        let la = encoder.encode_frame_flat(&a.frame(i))?;
        let lb = encoder.encode_frame_flat(&b.frame(i))?;
        acc += cosine_similarity(&la, &lb)?;
    }
    Ok(100.0 * acc / f as f64)
}

/// Flicker/abruptness score in percent: each interior frame is reconstructed
/// as the pixel-wise mean of its neighbors and the score is
/// 100 * (1 - mean absolute error).
pub fn dynamic_smoothness(clip: &SequenceClip) -> Result<f64> {
    let f = clip.frames();
    if f < 3 {
        return Err(Error::input(format!("dynamic smoothness requires F >= 3, got {f}")));
    }
    let stride = clip.channels() * clip.height() * clip.width();
    let px = clip.pixels.data();
    let mut acc = 0.0f64;
    for i in 1..f - 1 {
        let prev = &px[(i - 1) * stride..i * stride];
        let cur = &px[i * stride..(i + 1) * stride];
        let next = &px[(i + 1) * stride..(i + 2) * stride];
        for j in 0..stride {
            let recon = 0.5 * (prev[j] as f64 + next[j] as f64);
            acc += (recon - cur[j] as f64).abs();
        }
    }
    let mae = acc / ((f - 2) * stride) as f64;
    Ok(100.0 * (1.0 - mae))
}

// ---------------------------------------------------------------------------
// Model-level stages
// ---------------------------------------------------------------------------

fn clip_loss(scorer: &dyn ClipScorer, clip: &SequenceClip) -> Result<f64> {
    let logits = scorer.class_logits(clip)?;
    if clip.class_id >= logits.len() {
        return Err(Error::input(format!(
            "clip {} class {} outside classifier range {}",
            clip.id,
            clip.class_id,
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&z| ((z as f64) - max).exp()).sum();
    let loss = -(((logits[clip.class_id] as f64) - max) - sum.ln());
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss for clip {}", clip.id)));
    }
    Ok(loss)
}

/// Stage 1 against a real-data classifier. Returns surviving groups and the
/// per-group report fragment; empty input groups are skipped with a notice.
pub fn stage1_semantic_filter(
    groups: &[SyntheticGroup],
    scorer: &dyn ClipScorer,
) -> Result<(Vec<SyntheticGroup>, Vec<Stage1Group>, Vec<String>)> {
    let mut notices = Vec::new();
    let mut losses: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
    for group in groups {
        if group.clips.is_empty() {
            notices.push(format!("group {} is empty; skipped in stage 1", group.group_id));
        }
        let ls = group
            .clips
            .iter()
            .map(|clip| clip_loss(scorer, clip))
            .collect::<Result<Vec<_>>>()?;
        losses.push(ls);
    }
    let (masks, thresholds) = stage1_keep_masks(&losses);
    let mut out_groups = Vec::new();
    let mut fragments = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let Some(threshold) = thresholds[gi] else { continue };
        let clips: Vec<SequenceClip> = group
            .clips
            .iter()
            .zip(&masks[gi])
            .filter(|(_, &keep)| keep)
            .map(|(c, _)| c.clone())
            .collect();
        fragments.push(Stage1Group {
            group_id: group.group_id,
            threshold,
            clips: group
                .clips
                .iter()
                .zip(&losses[gi])
                .zip(&masks[gi])
                .map(|((c, &l), &keep)| ClipDecision { id: c.id.clone(), value: l, kept: keep })
                .collect(),
        });
        if !clips.is_empty() {
            out_groups.push(SyntheticGroup {
                group_id: group.group_id,
                bank: group.bank.clone(),
                clips,
            });
        }
    }
    Ok((out_groups, fragments, notices))
}

/// Run all enabled stages in order and assemble the report. Deterministic
/// given (groups, scorer, encoder, seed).
pub fn run_filter_pipeline(
    groups: &[SyntheticGroup],
    scorer: &dyn ClipScorer,
    encoder: &dyn FrameEncoder,
    config: &FilterConfig,
    rng: RngState,
) -> Result<(Vec<SyntheticGroup>, FilterReport)> {
    let clips_in: usize = groups.iter().map(|g| g.clips.len()).sum();
    let mut notices = Vec::new();

    // Stage 1.
    let (s1, stage1_report) = if config.stage1_enabled {
        let (s1, frag, mut notes) = stage1_semantic_filter(groups, scorer)?;
        notices.append(&mut notes);
        (s1, Some(frag))
    } else {
        (groups.to_vec(), None)
    };
    let clips_s1: usize = s1.iter().map(|g| g.clips.len()).sum();

    // Consistency values over all of S (thresholds) and over S1 (tested set).
    let (s2, stage2_report) = if config.stage2_enabled {
        let mut values_all = Vec::new();
        let threshold_groups: &[SyntheticGroup] =
            if config.stage2_thresholds_from_s1 { &s1 } else { groups };
        for group in threshold_groups {
            for clip in &group.clips {
                values_all.push((clip.id.clone(), compute_seq_consistency(clip, encoder)?));
            }
        }
        let mut s1_values = Vec::new();
        for group in &s1 {
            for clip in &group.clips {
                s1_values.push(compute_seq_consistency(clip, encoder)?);
            }
        }
        let raw: Vec<f64> = values_all.iter().map(|(_, v)| *v).collect();
        let outcome =
            stage2_keep_mask(&raw, &s1_values, config.kmeans_k, rng)?;
        if outcome.disabled {
            notices.push(format!(
                "stage 2 disabled: {} consistency values is fewer than K={}",
                raw.len(),
                config.kmeans_k
            ));
        }
        let mut s2_groups = Vec::new();
        let mut clip_reports = Vec::new();
        let mut cursor = 0usize;
        for group in &s1 {
            let mut kept_clips = Vec::new();
            for clip in &group.clips {
                let keep = outcome.kept[cursor];
                clip_reports.push(ClipDecision {
                    id: clip.id.clone(),
                    value: s1_values[cursor],
                    kept: keep,
                });
                if keep {
                    kept_clips.push(clip.clone());
                }
                cursor += 1;
            }
            if !kept_clips.is_empty() {
                s2_groups.push(SyntheticGroup {
                    group_id: group.group_id,
                    bank: group.bank.clone(),
                    clips: kept_clips,
                });
            }
        }
        let (t_low, t_high) = outcome.bounds.unwrap_or((f64::NAN, f64::NAN));
        (
            s2_groups,
            Some(Stage2Report {
                t_low,
                t_high,
                values_all: values_all
                    .into_iter()
                    .map(|(id, v)| ClipDecision { id, value: v, kept: true })
                    .collect(),
                clips: clip_reports,
                disabled: outcome.disabled,
            }),
        )
    } else {
        (s1.clone(), None)
    };
    let clips_s2: usize = s2.iter().map(|g| g.clips.len()).sum();

    // Stage 3.
    let (s3, stage3_report) = if config.stage3_enabled {
        let flat: Vec<&SequenceClip> = s2.iter().flat_map(|g| g.clips.iter()).collect();
        // Encode every clip's frames once.
        let mut latents: Vec<Vec<Tensor>> = Vec::with_capacity(flat.len());
        for clip in &flat {
            let ls = (0..clip.frames())
                .map(|i| encoder.encode_frame_flat(&clip.frame(i)))
                .collect::<Result<Vec<_>>>()?;
            latents.push(ls);
        }
        let theta_of = |a: usize, b: usize| -> Result<f64> {
            let (la, lb) = (&latents[a], &latents[b]);
            if la.len() != lb.len() {
                return Err(Error::input("frame count mismatch in stage 3"));
            }
            let mut acc = 0.0;
            for (x, y) in la.iter().zip(lb) {
                acc += cosine_similarity(x, y)?;
            }
            Ok(100.0 * acc / la.len() as f64)
        };
        let mut theta_err: Option<Error> = None;
        let group_sizes: Vec<usize> = s2.iter().map(|g| g.clips.len()).collect();
        let mut theta_fn = |a: usize, b: usize| -> f64 {
            match theta_of(a, b) {
                Ok(v) => v,
                Err(e) => {
                    theta_err.get_or_insert(e);
                    f64::NEG_INFINITY
                }
            }
        };
        let (masks, pair_logs, dup_flags) =
            stage3_keep_masks(&group_sizes, &mut theta_fn, config.theta_threshold);
        if let Some(e) = theta_err {
            return Err(e);
        }
        let mut s3_groups = Vec::new();
        let mut decisions = Vec::new();
        let mut idx = 0usize;
        let mut first_counter = 0usize;
        for (gi, group) in s2.iter().enumerate() {
            let mut kept_clips = Vec::new();
            for (local, clip) in group.clips.iter().enumerate() {
                let kept = masks[gi][local];
                let first = local == 0;
                decisions.push(Stage3Decision {
                    id: clip.id.clone(),
                    group_id: group.group_id,
                    first_in_group: first,
                    kept,
                    duplicate_flagged: if first {
                        let f = dup_flags[first_counter];
                        f
                    } else {
                        false
                    },
                    pairs: pair_logs[idx]
                        .iter()
                        .map(|&(j, v)| (flat[j].id.clone(), v))
                        .collect(),
                });
                if first {
                    first_counter += 1;
                }
                if kept {
                    kept_clips.push(clip.clone());
                }
                idx += 1;
            }
            if !kept_clips.is_empty() {
                s3_groups.push(SyntheticGroup {
                    group_id: group.group_id,
                    bank: group.bank.clone(),
                    clips: kept_clips,
                });
            }
        }
        (s3_groups, Some(decisions))
    } else {
        (s2.clone(), None)
    };
    let clips_s3: usize = s3.iter().map(|g| g.clips.len()).sum();

    // Per-clip decisions table.
    let mut decisions = Vec::new();
    for group in groups {
        for clip in &group.clips {
            let in_s1 = s1
                .iter()
                .any(|g| g.group_id == group.group_id && g.clips.iter().any(|c| c.id == clip.id));
            let in_s2 = s2
                .iter()
                .any(|g| g.group_id == group.group_id && g.clips.iter().any(|c| c.id == clip.id));
            let in_s3 = s3
                .iter()
                .any(|g| g.group_id == group.group_id && g.clips.iter().any(|c| c.id == clip.id));
            decisions.push(ClipOutcome {
                id: clip.id.clone(),
                group_id: group.group_id,
                class_id: clip.class_id,
                stage1_kept: config.stage1_enabled.then_some(in_s1),
                stage2_kept: (config.stage2_enabled && in_s1).then_some(in_s2),
                stage3_kept: (config.stage3_enabled && in_s2).then_some(in_s3),
                kept: in_s3,
            });
        }
    }

    let report = FilterReport {
        counts: FilterCounts {
            groups_in: groups.len(),
            clips_in,
            groups_stage1: s1.len(),
            clips_stage1: clips_s1,
            groups_stage2: s2.len(),
            clips_stage2: clips_s2,
            clips_stage3: clips_s3,
        },
        stage1: stage1_report,
        stage2: stage2_report,
        stage3: stage3_report,
        decisions,
        notices,
    };
    debug_assert!(clips_in >= clips_s1 && clips_s1 >= clips_s2 && clips_s2 >= clips_s3);
    Ok((s3, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::clip::Source;

    fn state() -> RngState {
        RngState::new(0, 7)
    }

    /// Identity-style encoder: the "latent" is the frame itself, optionally
    /// mapped through a fixed linear table for orthogonality fixtures.
    struct PassThroughEncoder;

    impl FrameEncoder for PassThroughEncoder {
        fn encode_frame_flat(&self, frame: &Tensor) -> Result<Tensor> {
            let n = frame.numel();
            frame.reshape(&[n])
        }
    }

    fn clip_with_frames(id: &str, frames: Vec<Vec<f32>>, class_id: usize) -> SequenceClip {
        let f = frames.len();
        let w = frames[0].len();
        let mut data = Vec::new();
        for fr in frames {
            data.extend(fr);
        }
        SequenceClip::new(
            id,
            Tensor::new(&[f, 1, 1, w], data).unwrap(),
            class_id,
            vec![],
            Source::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn stage1_hand_trace() {
        let losses = vec![vec![0.2, 0.4, 0.9]];
        let (masks, thresholds) = stage1_keep_masks(&losses);
        assert!((thresholds[0].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(masks[0], vec![true, true, false]);
    }

    #[test]
    fn stage1_equal_losses_keep_all() {
        let losses = vec![vec![0.7, 0.7, 0.7]];
        let (masks, _) = stage1_keep_masks(&losses);
        assert_eq!(masks[0], vec![true, true, true]);
    }

    #[test]
    fn stage1_always_keeps_at_least_one() {
        let mut rng = RngState::new(3, 1).rng();
        for _ in 0..50 {
            let group: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.0, 5.0)).collect();
            let (masks, _) = stage1_keep_masks(&[group]);
            assert!(masks[0].iter().any(|&k| k));
        }
    }

    #[test]
    fn stage2_separated_clusters() {
        let a = vec![10.0, 11.0, 40.0, 41.0, 60.0, 61.0, 95.0, 96.0];
        let (t_low, t_high) = stage2_bounds(&a, 4, state()).unwrap();
        assert_eq!(t_low, 40.0);
        assert_eq!(t_high, 61.0);
        let outcome = stage2_keep_mask(&a, &a, 4, state()).unwrap();
        assert_eq!(
            outcome.kept,
            vec![false, false, true, true, true, true, false, false]
        );
    }

    #[test]
    fn stage2_boundary_values_inclusive() {
        let a = vec![10.0, 11.0, 40.0, 41.0, 60.0, 61.0, 95.0, 96.0];
        let outcome = stage2_keep_mask(&a, &[40.0, 61.0, 39.9, 61.1], 4, state()).unwrap();
        assert_eq!(outcome.kept, vec![true, true, false, false]);
    }

    #[test]
    fn stage2_identical_values_keep_everything() {
        let a = vec![88.0; 10];
        let outcome = stage2_keep_mask(&a, &a, 4, state()).unwrap();
        assert!(!outcome.disabled);
        let (t_low, t_high) = outcome.bounds.unwrap();
        assert_eq!(t_low, 88.0);
        assert_eq!(t_high, 88.0);
        assert!(outcome.kept.iter().all(|&k| k));
    }

    #[test]
    fn stage2_too_few_values_disables() {
        let a = vec![1.0, 2.0, 3.0];
        let outcome = stage2_keep_mask(&a, &[1.0, 2.0], 4, state()).unwrap();
        assert!(outcome.disabled);
        assert!(outcome.kept.iter().all(|&k| k));
    }

    #[test]
    fn stage3_identical_group_keeps_first_only() {
        let mut theta = |_a: usize, _b: usize| 100.0;
        let (masks, _, dups) = stage3_keep_masks(&[3], &mut theta, 98.0);
        assert_eq!(masks[0], vec![true, false, false]);
        assert!(!dups[0]);
    }

    #[test]
    fn stage3_all_diverse_keeps_everything() {
        let mut theta = |_a: usize, _b: usize| 10.0;
        let (masks, _, _) = stage3_keep_masks(&[2, 3], &mut theta, 98.0);
        assert!(masks.iter().flatten().all(|&k| k));
    }

    #[test]
    fn stage3_group_first_bypasses_check() {
        // Group 2's first clip duplicates group 1's first: both kept, flagged.
        let mut theta = |a: usize, b: usize| if (a, b) == (1, 0) { 100.0 } else { 0.0 };
        let (masks, _, dups) = stage3_keep_masks(&[1, 1], &mut theta, 98.0);
        assert_eq!(masks, vec![vec![true], vec![true]]);
        assert_eq!(dups, vec![false, true]);
    }

    #[test]
    fn seq_consistency_static_clip_is_100() {
        let clip = clip_with_frames("s", vec![vec![0.2, 0.4, 0.6]; 4], 0);
        let v = compute_seq_consistency(&clip, &PassThroughEncoder).unwrap();
        assert!((v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn seq_consistency_orthogonal_latents_is_0() {
        let clip = clip_with_frames(
            "o",
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            0,
        );
        let v = compute_seq_consistency(&clip, &PassThroughEncoder).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn seq_consistency_needs_two_frames() {
        let clip = clip_with_frames("x", vec![vec![0.5, 0.5]], 0);
        assert!(compute_seq_consistency(&clip, &PassThroughEncoder).is_err());
    }

    #[test]
    fn theta_self_and_symmetry() {
        let a = clip_with_frames("a", vec![vec![0.1, 0.9], vec![0.4, 0.2]], 0);
        let b = clip_with_frames("b", vec![vec![0.7, 0.3], vec![0.2, 0.8]], 0);
        let enc = PassThroughEncoder;
        assert!((inter_clip_similarity(&a, &a, &enc).unwrap() - 100.0).abs() < 1e-9);
        let ab = inter_clip_similarity(&a, &b, &enc).unwrap();
        let ba = inter_clip_similarity(&b, &a, &enc).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn theta_orthogonal_frames_is_0() {
        let a = clip_with_frames("a", vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
        let b = clip_with_frames("b", vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0);
        let v = inter_clip_similarity(&a, &b, &PassThroughEncoder).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn theta_frame_count_mismatch_errors() {
        let a = clip_with_frames("a", vec![vec![1.0, 0.0]; 2], 0);
        let b = clip_with_frames("b", vec![vec![1.0, 0.0]; 3], 0);
        assert!(inter_clip_similarity(&a, &b, &PassThroughEncoder).is_err());
    }

    #[test]
    fn smoothness_linear_and_static_are_100() {
        let linear = clip_with_frames(
            "l",
            (0..4).map(|i| vec![0.1 * i as f32, 0.2 * i as f32]).collect(),
            0,
        );
        assert!((dynamic_smoothness(&linear).unwrap() - 100.0).abs() < 1e-6);
        let still = clip_with_frames("s", vec![vec![0.3, 0.3]; 4], 0);
        assert!((dynamic_smoothness(&still).unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn smoothness_alternating_is_50() {
        // All-0 and all-1 frames alternating in pairs: every interior frame
        // has one all-0 and one all-1 neighbor, so the reconstruction is 0.5
        // everywhere and errs by exactly 0.5.
        let frames = (0..8)
            .map(|i| vec![if (i / 2) % 2 == 0 { 0.0 } else { 1.0 }; 4])
            .collect();
        let clip = clip_with_frames("alt", frames, 0);
        assert!((dynamic_smoothness(&clip).unwrap() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn smoothness_needs_three_frames() {
        let clip = clip_with_frames("x", vec![vec![0.5]; 2], 0);
        assert!(dynamic_smoothness(&clip).is_err());
    }
}
