//! Two-stream conditional denoising U-Net.
//!
//! The main stream denoises the latent with text cross-attention; the
//! anchor stream runs the clean anchor latent through a mirrored down
//! path and injects its per-resolution features into the main stream
//! through zero-initialized 1x1 projections. Both the final output conv
//! and the injections start at zero, so a fresh network predicts exactly
//! zero noise and the anchor is neutral until trained.

use crate::conditioning::{self, Conditioning, SEQ_LEN};
use crate::error::{Result, TidmError};
use crate::nn;
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{bind_params, ParamStore, Real, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// One multiplier per down level plus a final one for the mid block
    /// (`[1, 2, 4]` = levels at 1x and 2x base, mid at 4x base).
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    /// How many of the lowest-resolution levels get text cross-attention
    /// (the mid block always has it).
    pub attention_levels: usize,
    pub time_embed_dim: usize,
    pub context_dim: usize,
    pub latent_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_resolution: 2,
            attention_levels: 2,
            time_embed_dim: 128,
            context_dim: conditioning::EMBED_DIM,
            latent_channels: 4,
        }
    }
}

impl DenoiserConfig {
    /// Number of down levels (excludes the mid multiplier).
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len() - 1
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    fn mid_width(&self) -> usize {
        self.base_channels * *self.channel_multipliers.last().unwrap()
    }

    fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() < 2 {
            return Err(TidmError::invalid(
                "denoiser config: need at least one level multiplier plus the mid multiplier",
            ));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0)
            || self.base_channels == 0
            || self.blocks_per_resolution == 0
            || self.latent_channels == 0
            || self.context_dim == 0
        {
            return Err(TidmError::invalid("denoiser config: zero-sized field"));
        }
        if self.attention_levels > self.levels() {
            return Err(TidmError::invalid(format!(
                "denoiser config: {} attention levels for {} levels",
                self.attention_levels,
                self.levels()
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(TidmError::invalid(
                "denoiser config: time_embed_dim must be even and >= 2",
            ));
        }
        Ok(())
    }

    /// Smallest latent spatial extent the down path can handle.
    fn min_spatial(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Fresh two-stream parameters under `unet/main/` and `unet/anchor/`.
pub fn init_denoiser_params(config: &DenoiserConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let mut p = ParamStore::new();
    let td = config.time_embed_dim;
    let c0 = config.width(0);
    let zc = config.latent_channels;
    // time MLP over raw sinusoidal features
    nn::init_linear(&mut p, "unet/main/temb0", td, td, rng)?;
    nn::init_linear(&mut p, "unet/main/temb1", td, td, rng)?;
    for stream in ["main", "anchor"] {
        nn::init_conv(&mut p, &format!("unet/{stream}/in"), c0, zc, 3, rng)?;
        let mut cur = c0;
        for level in 0..config.levels() {
            let w = config.width(level);
            for block in 0..config.blocks_per_resolution {
                let name = format!("unet/{stream}/down{level}/block{block}");
                nn::init_res_block(&mut p, &format!("{name}/res"), cur, w, Some(td), rng)?;
                if config.has_attention(level) {
                    nn::init_cross_attn(&mut p, &format!("{name}/attn"), w, config.context_dim, rng)?;
                }
                cur = w;
            }
            if stream == "anchor" {
                // per-resolution injection into the main stream
                nn::init_conv_zero(&mut p, &format!("unet/anchor/inject{level}"), w, w, 1)?;
            }
            if level + 1 < config.levels() {
                nn::init_conv(&mut p, &format!("unet/{stream}/downsample{level}"), cur, cur, 3, rng)?;
            }
        }
        if stream == "anchor" {
            break;
        }
        // mid block, main stream only
        let cm = config.mid_width();
        nn::init_res_block(&mut p, "unet/main/mid/res0", cur, cm, Some(td), rng)?;
        nn::init_cross_attn(&mut p, "unet/main/mid/attn", cm, config.context_dim, rng)?;
        nn::init_res_block(&mut p, "unet/main/mid/res1", cm, cm, Some(td), rng)?;
        // up path: blocks+1 res blocks per level, each eating one skip
        let mut cur = cm;
        for level in (0..config.levels()).rev() {
            let w = config.width(level);
            for block in 0..=config.blocks_per_resolution {
                let skip_w = skip_width(config, level, block);
                let name = format!("unet/main/up{level}/block{block}");
                nn::init_res_block(&mut p, &format!("{name}/res"), cur + skip_w, w, Some(td), rng)?;
                if config.has_attention(level) {
                    nn::init_cross_attn(&mut p, &format!("{name}/attn"), w, config.context_dim, rng)?;
                }
                cur = w;
            }
            if level > 0 {
                nn::init_conv(&mut p, &format!("unet/main/upsample{level}"), cur, cur, 3, rng)?;
            }
        }
        nn::init_group_norm(&mut p, "unet/main/gn_out", cur)?;
        // zero-init: a fresh network predicts zero noise
        nn::init_conv_zero(&mut p, "unet/main/out", zc, cur, 3)?;
    }
    Ok(p)
}

/// Width of the skip tensor popped by up-level `level`, block `block`.
/// The down path pushes: conv_in output, each down block output, and each
/// downsample output; pops happen in reverse.
fn skip_width(config: &DenoiserConfig, level: usize, block: usize) -> usize {
    if block < config.blocks_per_resolution {
        // outputs of this level's down blocks
        config.width(level)
    } else if level == 0 {
        // the conv_in output
        config.width(0)
    } else {
        // the downsample conv between level-1 and this level keeps the
        // width of level-1
        config.width(level - 1)
    }
}

/// Per-sample inputs to a batched denoiser evaluation.
#[derive(Clone, Debug)]
pub struct DenoiserBatch {
    /// Noisy latents [n, c, h, w].
    pub z_t: Tensor,
    pub timesteps: Vec<usize>,
    /// Token id sequences, one per sample.
    pub token_ids: Vec<Vec<usize>>,
    /// Clean anchor latents [n, c, h, w] (zeros where absent).
    pub anchor: Tensor,
    /// 1.0 where the sample has an anchor, 0.0 where it does not.
    pub anchor_mask: Vec<f32>,
}

impl DenoiserBatch {
    pub fn validate(&self, config: &DenoiserConfig) -> Result<()> {
        let s = self.z_t.shape();
        if s.len() != 4 || s[1] != config.latent_channels {
            return Err(TidmError::shape(
                "denoiser",
                format!("z_t expected [n,{},h,w], got {s:?}", config.latent_channels),
            ));
        }
        let n = s[0];
        if self.timesteps.len() != n || self.token_ids.len() != n || self.anchor_mask.len() != n {
            return Err(TidmError::shape(
                "denoiser",
                format!(
                    "batch size mismatch: {n} latents, {} timesteps, {} prompts, {} masks",
                    self.timesteps.len(),
                    self.token_ids.len(),
                    self.anchor_mask.len()
                ),
            ));
        }
        if self.anchor.shape() != s {
            return Err(TidmError::shape(
                "denoiser",
                format!("anchor shape {:?} != z_t {s:?}", self.anchor.shape()),
            ));
        }
        let min = config.min_spatial();
        if s[2] < min || s[3] < min || s[2] % min != 0 || s[3] % min != 0 {
            return Err(TidmError::shape(
                "denoiser",
                format!("spatial {}x{} incompatible with {} down levels", s[2], s[3], config.levels()),
            ));
        }
        if self.token_ids.iter().any(|t| t.len() != SEQ_LEN) {
            return Err(TidmError::shape("denoiser", "bad token sequence length"));
        }
        Ok(())
    }
}

/// Full eps-prediction graph; returns a node shaped like `z_t`.
pub fn denoiser_graph<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &DenoiserConfig,
    batch: &DenoiserBatch,
) -> Result<NodeId> {
    batch.validate(config)?;
    let mask: Vec<T> = batch.anchor_mask.iter().map(|&m| T::from_f32(m)).collect();

    // time features -> 2-layer MLP
    let sine = nn::sinusoidal_time_embedding(&batch.timesteps, config.time_embed_dim)?;
    let sine = tape.leaf(sine.cast::<T>());
    let temb = nn::linear(tape, bound, "unet/main/temb0", sine)?;
    let temb = tape.silu(temb)?;
    let temb = nn::linear(tape, bound, "unet/main/temb1", temb)?;

    // text context [n, L, context_dim]
    let context = conditioning::embed_on_tape(tape, bound, &batch.token_ids)?;

    // anchor stream: per-resolution features from the clean anchor latent
    let anchor_in = tape.leaf(batch.anchor.cast::<T>());
    let mut a = nn::conv(tape, bound, "unet/anchor/in", anchor_in, 1, 1)?;
    let mut injections = Vec::with_capacity(config.levels());
    for level in 0..config.levels() {
        for block in 0..config.blocks_per_resolution {
            let name = format!("unet/anchor/down{level}/block{block}");
            a = nn::res_block(tape, bound, &format!("{name}/res"), a, Some(temb))?;
            if config.has_attention(level) {
                a = nn::cross_attn_block(tape, bound, &format!("{name}/attn"), a, context)?;
            }
        }
        let inj = nn::conv(tape, bound, &format!("unet/anchor/inject{level}"), a, 1, 0)?;
        // zero out injections for samples without an anchor
        injections.push(tape.scale_per_sample(inj, &mask)?);
        if level + 1 < config.levels() {
            a = nn::conv(tape, bound, &format!("unet/anchor/downsample{level}"), a, 2, 1)?;
        }
    }

    // main stream down path
    let z_in = tape.leaf(batch.z_t.cast::<T>());
    let mut h = nn::conv(tape, bound, "unet/main/in", z_in, 1, 1)?;
    let mut skips = vec![h];
    for level in 0..config.levels() {
        for block in 0..config.blocks_per_resolution {
            let name = format!("unet/main/down{level}/block{block}");
            h = nn::res_block(tape, bound, &format!("{name}/res"), h, Some(temb))?;
            if config.has_attention(level) {
                h = nn::cross_attn_block(tape, bound, &format!("{name}/attn"), h, context)?;
            }
            skips.push(h);
        }
        h = tape.add(h, injections[level])?;
        // keep the skip stack consistent with the injected features
        *skips.last_mut().unwrap() = h;
        if level + 1 < config.levels() {
            h = nn::conv(tape, bound, &format!("unet/main/downsample{level}"), h, 2, 1)?;
            skips.push(h);
        }
    }

    // mid
    h = nn::res_block(tape, bound, "unet/main/mid/res0", h, Some(temb))?;
    h = nn::cross_attn_block(tape, bound, "unet/main/mid/attn", h, context)?;
    h = nn::res_block(tape, bound, "unet/main/mid/res1", h, Some(temb))?;

    // up path
    for level in (0..config.levels()).rev() {
        for block in 0..=config.blocks_per_resolution {
            let skip = skips.pop().expect("skip stack underflow");
            h = tape.concat_channels(h, skip)?;
            let name = format!("unet/main/up{level}/block{block}");
            h = nn::res_block(tape, bound, &format!("{name}/res"), h, Some(temb))?;
            if config.has_attention(level) {
                h = nn::cross_attn_block(tape, bound, &format!("{name}/attn"), h, context)?;
            }
        }
        if level > 0 {
            h = tape.upsample_nearest(h, 2)?;
            h = nn::conv(tape, bound, &format!("unet/main/upsample{level}"), h, 1, 1)?;
        }
    }
    debug_assert!(skips.is_empty());
    nn::norm_act_conv(tape, bound, "unet/main/gn_out", "unet/main/out", h, 1, 1)
}

/// Batched forward pass without autodiff bookkeeping.
pub fn predict_noise_batch(
    params: &ParamStore,
    config: &DenoiserConfig,
    batch: &DenoiserBatch,
) -> Result<Tensor> {
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, params);
    let out = denoiser_graph(&mut tape, &bound, config, batch)?;
    Ok(tape.value(out).clone())
}

/// Single-sample eps prediction for a latent [c, h, w].
pub fn predict_noise(
    params: &ParamStore,
    config: &DenoiserConfig,
    z_t: &Tensor,
    t: usize,
    cond: &Conditioning,
) -> Result<Tensor> {
    let s = z_t.shape().to_vec();
    if s.len() != 3 {
        return Err(TidmError::shape(
            "predict_noise",
            format!("expected [c,h,w] latent, got {s:?}"),
        ));
    }
    let z = z_t.reshape(&[1, s[0], s[1], s[2]])?;
    let (anchor, mask) = match &cond.anchor_latent {
        Some(a) => {
            if a.shape() != z_t.shape() {
                return Err(TidmError::shape(
                    "predict_noise",
                    format!("anchor shape {:?} != latent {s:?}", a.shape()),
                ));
            }
            (a.reshape(&[1, s[0], s[1], s[2]])?, 1.0)
        }
        None => (Tensor::zeros(&[1, s[0], s[1], s[2]]), 0.0),
    };
    let batch = DenoiserBatch {
        z_t: z,
        timesteps: vec![t],
        token_ids: vec![cond.token_ids.clone()],
        anchor,
        anchor_mask: vec![mask],
    };
    let out = predict_noise_batch(params, config, &batch)?;
    out.reshape(&s)
}
