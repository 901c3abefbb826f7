//! Temporal attention machinery for sequence denoising: sequential attention
//! (same spatial site across frames), key-frame attention (each frame attends
//! to the first and previous frames), and projection-free motion-field
//! attention over traced patch pathways. Key-frame and motion-field attention
//! run in cascade as one block.

use crate::autodiff::Var;
use crate::conditioning::MotionField;
use crate::error::{Error, Result};
use crate::nn::{ParamRegistry, Projection};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// An F x c x h x w latent stack with an explicit frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T: Real = f32> {
    pub latents: Tensor<T>,
}

impl<T: Real> LatentSequence<T> {
    pub fn new(latents: Tensor<T>) -> Result<Self> {
        if latents.rank() != 4 {
            return Err(Error::shape("LatentSequence expects (F,c,h,w)"));
        }
        if latents.shape()[0] == 0 {
            return Err(Error::shape("LatentSequence requires F >= 1"));
        }
        Ok(LatentSequence { latents })
    }

    pub fn frames(&self) -> usize {
        self.latents.shape()[0]
    }
}

/// (F,c,h,w) -> (h*w, F, c): one row-block of frame features per spatial site.
fn to_site_tokens<T: Real>(z: &Var<T>) -> Var<T> {
    let s = z.shape();
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    z.permute(&[2, 3, 0, 1]).reshape(&[h * w, f, c])
}

fn from_site_tokens<T: Real>(tokens: &Var<T>, shape: &[usize]) -> Var<T> {
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    tokens.reshape(&[h, w, f, c]).permute(&[2, 3, 0, 1])
}

/// (F,c,h,w) -> (F, h*w, c): per-frame token matrices.
fn to_frame_tokens<T: Real>(z: &Var<T>) -> Var<T> {
    let s = z.shape();
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    z.permute(&[0, 2, 3, 1]).reshape(&[f, h * w, c])
}

fn from_frame_tokens<T: Real>(tokens: &Var<T>, shape: &[usize]) -> Var<T> {
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    tokens.reshape(&[f, h, w, c]).permute(&[0, 3, 1, 2])
}

fn apply_proj<T: Real>(tokens: &Var<T>, proj: &Projection<T>) -> Var<T> {
    // (B, n, c) x (c, c') applied row-wise.
    let s = tokens.shape();
    let flat = tokens.reshape(&[s[0] * s[1], s[2]]);
    let out = proj.forward(&flat);
    let oc = out.shape()[1];
    out.reshape(&[s[0], s[1], oc])
}

fn batched_softmax<T: Real>(scores: &Var<T>) -> Var<T> {
    let s = scores.shape();
    scores.reshape(&[s[0] * s[1], s[2]]).softmax_rows().reshape(&s)
}

/// Attention across frames at fixed spatial sites, with Q/K/V projections and
/// a zero-initialized output projection so the residual form is an identity
/// at insertion time.
pub struct SequentialAttention<T: Real = f32> {
    pub wq: Projection<T>,
    pub wk: Projection<T>,
    pub wv: Projection<T>,
    pub wo: Projection<T>,
}

impl<T: Real> SequentialAttention<T> {
    pub fn new(channels: usize, rng: &mut crate::rng::Rng) -> Self {
        SequentialAttention {
            wq: Projection::new(channels, channels, rng),
            wk: Projection::new(channels, channels, rng),
            wv: Projection::new(channels, channels, rng),
            wo: Projection::zeros(channels, channels),
        }
    }

    fn attend_tokens(&self, tokens: &Var<T>) -> Var<T> {
        let c = tokens.shape()[2];
        let q = apply_proj(tokens, &self.wq);
        let k = apply_proj(tokens, &self.wk);
        let v = apply_proj(tokens, &self.wv);
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        let weights = batched_softmax(&q.bmm_nt(&k).scale(scale));
        weights.bmm(&v)
    }

    /// Pure attention result (no output projection, no residual):
    /// per site, softmax(QK^T/sqrt(c)) V over the F frame features.
    pub fn attend(&self, z: &Var<T>) -> Var<T> {
        let shape = z.shape();
        from_site_tokens(&self.attend_tokens(&to_site_tokens(z)), &shape)
    }

    /// Residual layer form: z + W_o(attend(z)).
    pub fn forward(&self, z: &Var<T>) -> Var<T> {
        let shape = z.shape();
        let attn = self.attend_tokens(&to_site_tokens(z));
        let projected = apply_proj(&attn, &self.wo);
        z.add(&from_site_tokens(&projected, &shape))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.wq.register(&format!("{prefix}.wq"), reg);
        self.wk.register(&format!("{prefix}.wk"), reg);
        self.wv.register(&format!("{prefix}.wv"), reg);
        self.wo.register(&format!("{prefix}.wo"), reg);
    }
}

/// Per-frame spatial self-attention (patch-to-patch within one frame) with a
/// zero-initialized output projection and residual form.
pub struct SpatialSelfAttention<T: Real = f32> {
    pub wq: Projection<T>,
    pub wk: Projection<T>,
    pub wv: Projection<T>,
    pub wo: Projection<T>,
}

impl<T: Real> SpatialSelfAttention<T> {
    pub fn new(channels: usize, rng: &mut crate::rng::Rng) -> Self {
        SpatialSelfAttention {
            wq: Projection::new(channels, channels, rng),
            wk: Projection::new(channels, channels, rng),
            wv: Projection::new(channels, channels, rng),
            wo: Projection::new(channels, channels, rng),
        }
    }

    fn attend_tokens(&self, tokens: &Var<T>) -> Var<T> {
        let c = tokens.shape()[2];
        let q = apply_proj(tokens, &self.wq);
        let k = apply_proj(tokens, &self.wk);
        let v = apply_proj(tokens, &self.wv);
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        let weights = batched_softmax(&q.bmm_nt(&k).scale(scale));
        weights.bmm(&v)
    }

    /// Pure per-frame attention (no output projection, no residual).
    pub fn attend(&self, z: &Var<T>) -> Var<T> {
        let shape = z.shape();
        from_frame_tokens(&self.attend_tokens(&to_frame_tokens(z)), &shape)
    }

    pub fn forward(&self, z: &Var<T>) -> Var<T> {
        let shape = z.shape();
        let attn = self.attend_tokens(&to_frame_tokens(z));
        let projected = apply_proj(&attn, &self.wo);
        z.add(&from_frame_tokens(&projected, &shape))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.wq.register(&format!("{prefix}.wq"), reg);
        self.wk.register(&format!("{prefix}.wk"), reg);
        self.wv.register(&format!("{prefix}.wv"), reg);
        self.wo.register(&format!("{prefix}.wo"), reg);
    }
}

/// Key-frame attention: queries from frame l, keys/values from the
/// concatenation of frame 1 and frame l-1 (both references are frame 1 when
/// l = 1). Q/K/V projections are initialized from spatial self-attention
/// weights at inflation; the output projection starts at zero.
pub struct KeyFrameAttention<T: Real = f32> {
    pub wq: Projection<T>,
    pub wk: Projection<T>,
    pub wv: Projection<T>,
    pub wo: Projection<T>,
}

impl<T: Real> KeyFrameAttention<T> {
    pub fn new(channels: usize, rng: &mut crate::rng::Rng) -> Self {
        KeyFrameAttention {
            wq: Projection::new(channels, channels, rng),
            wk: Projection::new(channels, channels, rng),
            wv: Projection::new(channels, channels, rng),
            wo: Projection::zeros(channels, channels),
        }
    }

    /// Copy Q/K/V weights from a trained spatial self-attention layer.
    pub fn init_from_spatial(&self, spatial: &SpatialSelfAttention<T>) {
        self.wq.weight.set_value(spatial.wq.weight.value());
        self.wk.weight.set_value(spatial.wk.weight.value());
        self.wv.weight.set_value(spatial.wv.weight.value());
    }

    /// Token-level form of [`Self::attend`]: tokens are (F, hw, c).
    fn attend_tokens(&self, tokens: &Var<T>) -> Var<T> {
        let shape = tokens.shape();
        let (f, hw, c) = (shape[0], shape[1], shape[2]);
        let flat = tokens.reshape(&[f * hw, c]);
        // References per frame l: rows of frame 0 then rows of frame max(l-1, 0).
        let mut ref_idx = Vec::with_capacity(f * 2 * hw);
        for l in 0..f {
            let prev = l.saturating_sub(1);
            for r in 0..hw {
                ref_idx.push(r);
            }
            for r in 0..hw {
                ref_idx.push(prev * hw + r);
            }
        }
        let refs = flat.gather_rows(&ref_idx).reshape(&[f, 2 * hw, c]);
        let q = apply_proj(tokens, &self.wq);
        let k = apply_proj(&refs, &self.wk);
        let v = apply_proj(&refs, &self.wv);
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        let weights = batched_softmax(&q.bmm_nt(&k).scale(scale));
        weights.bmm(&v)
    }

    /// Pure attention result per frame against its reference frames
    /// (no output projection, no residual).
    pub fn attend(&self, z: &Var<T>) -> Var<T> {
        let shape = z.shape();
        from_frame_tokens(&self.attend_tokens(&to_frame_tokens(z)), &shape)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.wq.register(&format!("{prefix}.wq"), reg);
        self.wk.register(&format!("{prefix}.wk"), reg);
        self.wv.register(&format!("{prefix}.wv"), reg);
        self.wo.register(&format!("{prefix}.wo"), reg);
    }
}

/// The set of motion-traced patch pathways: one ordered chain of
/// (frame, row, col) cells per frame-1 grid cell. The set partitions all
/// (frame, cell) patch slots.
#[derive(Debug, Clone)]
pub struct PatchPathwaySet {
    pub pathways: Vec<Vec<(usize, usize, usize)>>,
    pub patch_scale: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
}

impl PatchPathwaySet {
    pub fn total_slots(&self) -> usize {
        self.pathways.iter().map(|p| p.len()).sum()
    }

    /// Flat (frame-major) slot indices in pathway order.
    pub fn slot_order(&self) -> Vec<usize> {
        let hw = self.grid_h * self.grid_w;
        let mut order = Vec::with_capacity(self.total_slots());
        for path in &self.pathways {
            for &(f, r, c) in path {
                order.push(f * hw + r * self.grid_w + c);
            }
        }
        order
    }

    /// True when every (frame, cell) slot is covered exactly once.
    pub fn is_partition(&self) -> bool {
        let hw = self.grid_h * self.grid_w;
        let mut seen = vec![false; self.frames * hw];
        for path in &self.pathways {
            if path.len() != self.frames {
                return false;
            }
            for &(f, r, c) in path {
                if f >= self.frames || r >= self.grid_h || c >= self.grid_w {
                    return false;
                }
                let idx = f * hw + r * self.grid_w + c;
                if seen[idx] {
                    return false;
                }
                seen[idx] = true;
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Mean displacement per m x m cell, scaled to cell units (divide by m) and
/// rounded half away from zero.
fn downsample_field(field: &MotionField, m: usize) -> (Vec<i64>, Vec<i64>) {
    let (h, w) = (field.height(), field.width());
    let (gh, gw) = (h / m, w / m);
    let mut dy = vec![0i64; gh * gw];
    let mut dx = vec![0i64; gh * gw];
    let round = |v: f64| -> i64 {
        if v >= 0.0 {
            (v + 0.5).floor() as i64
        } else {
            (v - 0.5).ceil() as i64
        }
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let mut sy = 0.0f64;
            let mut sx = 0.0f64;
            for py in gy * m..(gy + 1) * m {
                for px in gx * m..(gx + 1) * m {
                    sy += field.dy.data()[py * w + px] as f64;
                    sx += field.dx.data()[py * w + px] as f64;
                }
            }
            let inv = 1.0 / (m * m) as f64;
            dy[gy * gw + gx] = round(sy * inv / m as f64);
            dx[gy * gw + gx] = round(sx * inv / m as f64);
        }
    }
    (dy, dx)
}

/// Trace one pathway per frame-1 grid cell through the m-downsampled motion
/// fields.
///
/// Cells move by the local downsampled displacement each transition, clamped
/// to the grid. Where several pathways land on the same cell, one claimant is
/// kept (seeded uniform choice) and the rest are rerouted to the nearest
/// unclaimed cell (squared distance, row-major tie-break), so the result is
/// always a partition of all patch slots.
pub fn sample_patch_pathways(
    fields: &[MotionField],
    m: usize,
    rng_state: RngState,
) -> Result<PatchPathwaySet> {
    if fields.is_empty() {
        return Err(Error::input("sample_patch_pathways requires at least one field (f >= 2)"));
    }
    let (h, w) = (fields[0].height(), fields[0].width());
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::input(format!("patch scale {m} must divide H={h} and W={w}")));
    }
    for field in fields {
        if field.height() != h || field.width() != w {
            return Err(Error::input("inconsistent motion field extents"));
        }
    }
    let frames = fields.len() + 1;
    let (gh, gw) = (h / m, w / m);
    let cells = gh * gw;
    let mut rng = rng_state.rng();

    let mut pathways: Vec<Vec<(usize, usize, usize)>> = (0..cells)
        .map(|i| vec![(0usize, i / gw, i % gw)])
        .collect();
    let mut current: Vec<(usize, usize)> = (0..cells).map(|i| (i / gw, i % gw)).collect();

    for (step, field) in fields.iter().enumerate() {
        let (dy, dx) = downsample_field(field, m);
        let frame = step + 1;
        // Desired landing cell per pathway.
        let desired: Vec<(usize, usize)> = current
            .iter()
            .map(|&(r, c)| {
                let nr = (r as i64 + dy[r * gw + c]).clamp(0, gh as i64 - 1) as usize;
                let nc = (c as i64 + dx[r * gw + c]).clamp(0, gw as i64 - 1) as usize;
                (nr, nc)
            })
            .collect();
        // Claims per cell, in pathway order.
        let mut claims: Vec<Vec<usize>> = vec![Vec::new(); cells];
        for (p, &(r, c)) in desired.iter().enumerate() {
            claims[r * gw + c].push(p);
        }
        let mut claimed = vec![false; cells];
        let mut assigned: Vec<Option<(usize, usize)>> = vec![None; pathways.len()];
        // Winners first (row-major cell order; uniform choice among claimants).
        for cell in 0..cells {
            let list = &claims[cell];
            if list.is_empty() {
                continue;
            }
            let winner = if list.len() == 1 { list[0] } else { list[rng.below(list.len())] };
            claimed[cell] = true;
            assigned[winner] = Some((cell / gw, cell % gw));
        }
        // Losers reroute to the nearest unclaimed cell.
        for p in 0..pathways.len() {
            if assigned[p].is_some() {
                continue;
            }
            let (wy, wx) = desired[p];
            let mut best: Option<(usize, i64)> = None;
            for cell in 0..cells {
                if claimed[cell] {
                    continue;
                }
                let (r, c) = (cell / gw, cell % gw);
                let d = (r as i64 - wy as i64).pow(2) + (c as i64 - wx as i64).pow(2);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((cell, d));
                }
            }
            let (cell, _) = best.expect("pathway count equals cell count");
            claimed[cell] = true;
            assigned[p] = Some((cell / gw, cell % gw));
        }
        for (p, slot) in assigned.into_iter().enumerate() {
            let (r, c) = slot.unwrap();
            pathways[p].push((frame, r, c));
            current[p] = (r, c);
        }
    }

    Ok(PatchPathwaySet { pathways, patch_scale: m, grid_h: gh, grid_w: gw, frames })
}

fn check_pathway_grid<T: Real>(z: &Tensor<T>, pathways: &PatchPathwaySet) -> Result<()> {
    if z.rank() != 4 {
        return Err(Error::shape("motion_field_attention expects (F,c,h,w)"));
    }
    let (f, _c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    if f != pathways.frames || h != pathways.grid_h || w != pathways.grid_w {
        return Err(Error::shape(format!(
            "latent grid {f}x{h}x{w} does not match pathway grid {}x{}x{}",
            pathways.frames, pathways.grid_h, pathways.grid_w
        )));
    }
    Ok(())
}

fn mfa_tokens<T: Real>(tokens: &Var<T>, pathways: &PatchPathwaySet) -> Var<T> {
    let shape = tokens.shape();
    let (f, hw, c) = (shape[0], shape[1], shape[2]);
    let order = pathways.slot_order();
    let mut inverse = vec![0usize; order.len()];
    for (pos, &slot) in order.iter().enumerate() {
        inverse[slot] = pos;
    }
    let flat = tokens.reshape(&[f * hw, c]);
    let grouped = flat.gather_rows(&order).reshape(&[pathways.pathways.len(), f, c]);
    let scale = T::from_f64(1.0 / (c as f64).sqrt());
    let weights = batched_softmax(&grouped.bmm_nt(&grouped).scale(scale));
    let out = weights.bmm(&grouped).reshape(&[f * hw, c]);
    out.gather_rows(&inverse).reshape(&[f, hw, c])
}

/// Projection-free attention along each pathway, as a graph op. Every patch
/// queries the features of all f patches on its pathway (itself included);
/// the attention output replaces the patch feature.
pub fn motion_field_attention_var<T: Real>(z: &Var<T>, pathways: &PatchPathwaySet) -> Result<Var<T>> {
    check_pathway_grid(&z.value(), pathways)?;
    let shape = z.shape();
    Ok(from_frame_tokens(&mfa_tokens(&to_frame_tokens(z), pathways), &shape))
}

/// Plain-tensor form of [`motion_field_attention_var`].
pub fn motion_field_attention<T: Real>(
    z: &LatentSequence<T>,
    pathways: &PatchPathwaySet,
) -> Result<LatentSequence<T>> {
    check_pathway_grid(&z.latents, pathways)?;
    let out = crate::autodiff::no_grad(|| {
        motion_field_attention_var(&Var::constant(z.latents.clone()), pathways).map(|v| v.value())
    })?;
    LatentSequence::new(out)
}

/// Key-frame attention followed by motion-field attention, with the pathway
/// set sampled once per forward pass. The block's residual form applies the
/// key-frame output projection after the cascade, so a zero-initialized
/// projection makes insertion an exact identity.
pub struct SamBlock<T: Real = f32> {
    pub ka: KeyFrameAttention<T>,
    pub patch_scale: usize,
}

impl<T: Real> SamBlock<T> {
    pub fn new(channels: usize, patch_scale: usize, rng: &mut crate::rng::Rng) -> Self {
        SamBlock { ka: KeyFrameAttention::new(channels, rng), patch_scale }
    }

    fn cascade_tokens(
        &self,
        z: &Var<T>,
        fields: &[MotionField],
        rng_state: RngState,
    ) -> Result<Var<T>> {
        let tokens = to_frame_tokens(z);
        let ka_out = self.ka.attend_tokens(&tokens);
        let frames = z.shape()[0];
        if frames == 1 {
            return Ok(ka_out);
        }
        if fields.len() + 1 != frames {
            return Err(Error::input(format!(
                "expected {} motion fields for {frames} frames, got {}",
                frames - 1,
                fields.len()
            )));
        }
        let pathways = sample_patch_pathways(fields, self.patch_scale, rng_state)?;
        let grid = (z.shape()[2], z.shape()[3]);
        if pathways.frames != frames || pathways.grid_h != grid.0 || pathways.grid_w != grid.1 {
            return Err(Error::shape(format!(
                "latent grid {}x{}x{} does not match pathway grid {}x{}x{}",
                frames, grid.0, grid.1, pathways.frames, pathways.grid_h, pathways.grid_w
            )));
        }
        Ok(mfa_tokens(&ka_out, &pathways))
    }

    /// The pure cascade MFA(KA(z)). With a single frame the pathway stage is
    /// the identity and this reduces to the key-frame self-attention of that
    /// frame.
    pub fn cascade(&self, z: &Var<T>, fields: &[MotionField], rng_state: RngState) -> Result<Var<T>> {
        let shape = z.shape();
        Ok(from_frame_tokens(&self.cascade_tokens(z, fields, rng_state)?, &shape))
    }

    /// Residual form used inside the denoiser: z + W_o(cascade(z)).
    pub fn forward(&self, z: &Var<T>, fields: &[MotionField], rng_state: RngState) -> Result<Var<T>> {
        let shape = z.shape();
        let cascade = self.cascade_tokens(z, fields, rng_state)?;
        let projected = apply_proj(&cascade, &self.ka.wo);
        Ok(z.add(&from_frame_tokens(&projected, &shape)))
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        self.ka.register(&format!("{prefix}.ka"), reg);
    }
}

/// Spec-level cascade on plain latents: samples pathways from `fields` at
/// scale `m`, then runs MFA over the key-frame attention output.
pub fn sam_forward<T: Real>(
    block: &SamBlock<T>,
    z: &LatentSequence<T>,
    fields: &[MotionField],
    rng_state: RngState,
) -> Result<LatentSequence<T>> {
    let out = crate::autodiff::no_grad(|| {
        block.cascade(&Var::constant(z.latents.clone()), fields, rng_state).map(|v| v.value())
    })?;
    LatentSequence::new(out)
}

/// Zero motion fields at full resolution, used when the motion condition is
/// absent.
pub fn zero_fields(frames: usize, h: usize, w: usize) -> Vec<MotionField> {
    vec![MotionField::zeros(h, w); frames.saturating_sub(1)]
}
