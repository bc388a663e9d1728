//! Deterministic DDIM sampling with classifier-free guidance, anchor
//! initialization, and denoising-strength control.
//!
//! Each batch element runs on its own counter-based rng stream derived as
//! `seed ^ element_index`, so element i of a batch is bitwise identical to
//! a single-element run seeded with `seed ^ i`.

use crate::codec;
use crate::conditioning::{Conditioning, Vocabulary};
use crate::denoiser::{predict_noise, DenoiserConfig};
use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// DDIM inference steps S.
    pub steps: usize,
    /// Classifier-free guidance scale w.
    pub guidance_scale: f32,
    /// Denoising strength in [0,1]; values below 1 require an anchor.
    pub strength: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance_scale: 7.5,
            strength: 1.0,
            batch: 4,
            seed: 0,
        }
    }
}

/// Default strength when sampling from an anchor image.
pub const DEFAULT_ANCHOR_STRENGTH: f32 = 0.75;

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule, has_anchor: bool) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(TidmError::invalid(format!(
                "sampler: steps must be in [1, {}], got {}",
                schedule.len(),
                self.steps
            )));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(TidmError::invalid(format!(
                "sampler: guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(TidmError::invalid(format!(
                "sampler: strength must be in [0,1], got {}",
                self.strength
            )));
        }
        if self.strength < 1.0 && !has_anchor {
            return Err(TidmError::invalid(
                "sampler: strength < 1 requires an anchor image",
            ));
        }
        if self.batch == 0 {
            return Err(TidmError::invalid("sampler: batch must be >= 1"));
        }
        Ok(())
    }
}

/// Classifier-free combination eps_uncond + w (eps_cond - eps_uncond).
/// w = 1 returns the conditional branch without evaluating the
/// unconditional one (bitwise guidance neutrality); w = 0 likewise
/// returns the unconditional branch exactly.
pub fn guided_eps(
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    vocab: &Vocabulary,
    z_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    w: f32,
) -> Result<Tensor> {
    if w == 1.0 {
        return predict_noise(model, dcfg, z_t, t, cond);
    }
    let uncond = Conditioning::new(vocab.null_ids(), cond.anchor_latent.clone())?;
    let eps_uncond = predict_noise(model, dcfg, z_t, t, &uncond)?;
    if w == 0.0 {
        return Ok(eps_uncond);
    }
    let eps_cond = predict_noise(model, dcfg, z_t, t, cond)?;
    let diff = eps_cond.sub(&eps_uncond)?;
    eps_uncond.add_scaled(&diff, w)
}

/// Run one DDIM trajectory from `z` down the (descending) substep list,
/// asking `eps_fn(z_t, t)` for the noise estimate at each step.
pub fn ddim_trajectory<F>(
    schedule: &NoiseSchedule,
    mut z: Tensor,
    substeps: &[usize],
    mut eps_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    for (k, &t) in substeps.iter().enumerate() {
        let t_prev = substeps.get(k + 1).map(|&p| p as i64).unwrap_or(-1);
        let eps_hat = eps_fn(&z, t)?;
        let (z_next, _x0) = schedule.ddim_step(&z, &eps_hat, t, t_prev)?;
        z = z_next;
    }
    Ok(z)
}

/// Batched DDIM sampling. Returns latents [batch, c, h, w].
///
/// Without an anchor, each element starts from standard normal noise at
/// the largest timestep of the S-subsequence. With an anchor at strength
/// s, it starts from `add_noise(z_anchor, eps, t_start(s))` and runs only
/// the floor(s*S) lowest substeps; strength 0 replicates the anchor.
pub fn ddim_sample(
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    cond: &Conditioning,
    latent_shape: &[usize; 3],
    config: &SamplerConfig,
) -> Result<Tensor> {
    config.validate(schedule, cond.anchor_latent.is_some())?;
    if let Some(anchor) = &cond.anchor_latent {
        if anchor.shape() != latent_shape {
            return Err(TidmError::shape(
                "ddim_sample",
                format!("anchor {:?} vs latent shape {latent_shape:?}", anchor.shape()),
            ));
        }
    }
    let substeps = match cond.anchor_latent {
        Some(_) => {
            schedule
                .strength_to_start(config.strength as f64, config.steps)?
                .1
        }
        None => {
            let mut all = schedule.ddim_timesteps(config.steps)?;
            all.reverse();
            all
        }
    };
    let per = latent_shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(config.batch * per);
    for i in 0..config.batch {
        let mut rng = Rng::xor_stream(config.seed, i as u64);
        let z = match (&cond.anchor_latent, substeps.first()) {
            (Some(anchor), Some(&t_start)) => {
                let eps = rng.sample_standard_normal(latent_shape)?;
                schedule.add_noise(anchor, &eps, t_start)?
            }
            // strength 0: the anchor replica, no denoising at all
            (Some(anchor), None) => anchor.clone(),
            (None, _) => rng.sample_standard_normal(latent_shape)?,
        };
        let z = ddim_trajectory(schedule, z, &substeps, |z_t, t| {
            guided_eps(model, dcfg, vocab, z_t, t, cond, config.guidance_scale)
        })?;
        out.extend_from_slice(z.data());
    }
    Tensor::from_vec(
        vec![config.batch, latent_shape[0], latent_shape[1], latent_shape[2]],
        out,
    )
}

/// Text-and-anchor-guided image generation: tokenize, encode the anchor,
/// sample latents, decode, clamp.
pub fn generate(
    codec_params: &ParamStore,
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    prompt: &str,
    anchor_image: Option<&ImageTensor>,
    config: &SamplerConfig,
) -> Result<Vec<ImageTensor>> {
    let ids = vocab.tokenize(prompt)?;
    let anchor_latent = anchor_image
        .map(|img| codec::encode_image(codec_params, img))
        .transpose()?;
    let latent_shape = match &anchor_latent {
        Some(a) => [a.shape()[0], a.shape()[1], a.shape()[2]],
        None => [
            codec::LATENT_CHANNELS,
            crate::data::IMAGE_SIZE / codec::DOWN_FACTOR,
            crate::data::IMAGE_SIZE / codec::DOWN_FACTOR,
        ],
    };
    let cond = Conditioning::new(ids, anchor_latent)?;
    let latents = ddim_sample(model, dcfg, schedule, vocab, &cond, &latent_shape, config)?;
    codec::decode_to_images(codec_params, &latents)
}
