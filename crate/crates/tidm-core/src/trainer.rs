//! Base latent-diffusion training and Dreambooth-style fine-tuning with
//! prior preservation.
//!
//! Both losses are eps-prediction: the network is asked for the noise
//! that was mixed into a clean latent at a uniformly drawn timestep, and
//! the per-sample squared error is weighted by the schedule's per-step
//! loss weight (1.0 by default). The prior-preservation loss is the same
//! quantity evaluated on a frozen-base-generated prior batch with
//! independent draws, added with weight lambda.

use crate::codec;
use crate::conditioning::{Conditioning, Vocabulary, POS_EMBED, TOKEN_EMBED};
use crate::data::Dataset;
use crate::denoiser::{denoiser_graph, init_denoiser_params, DenoiserBatch, DenoiserConfig};
use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{backpropagate, bind_params, Adam, ParamStore, Real, Rng, Tensor};
use crate::sampler::{self, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// One training example: a clean latent, its prompt, and the optional
/// anchor latent fed to the anchor stream.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub z0: Tensor,
    pub token_ids: Vec<usize>,
    pub anchor: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Probability of replacing the text conditioning with <null>.
    pub text_drop_prob: f32,
    /// Probability of dropping the anchor stream input.
    pub anchor_drop_prob: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            text_drop_prob: 0.1,
            anchor_drop_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TidmError::invalid("train: epochs and batch_size must be >= 1"));
        }
        for (name, p) in [("text_drop_prob", self.text_drop_prob), ("anchor_drop_prob", self.anchor_drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TidmError::invalid(format!("train: {name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainMetrics {
    /// (global step, loss) per optimizer step.
    pub step_loss: Vec<(u64, f32)>,
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f32>,
    pub final_loss: f32,
}

/// mean over all elements of w_sample * (eps_hat - eps)^2; exact MSE when
/// every weight is 1.
pub fn weighted_eps_mse_graph<T: Real>(
    tape: &mut Tape<T>,
    eps_hat: NodeId,
    eps: NodeId,
    weights: &[T],
) -> Result<NodeId> {
    let diff = tape.sub(eps_hat, eps)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.scale_per_sample(sq, weights)?;
    tape.mean(weighted)
}

/// The eps-prediction training loss on a batch: draws per sample a uniform
/// timestep and standard-normal noise from `rng` (one t, then one eps
/// tensor per sample, in batch order).
pub fn eps_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    samples: &[TrainSample],
    rng: &mut Rng,
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(TidmError::invalid("eps loss: empty batch"));
    }
    let shape = samples[0].z0.shape().to_vec();
    if shape.len() != 3 {
        return Err(TidmError::shape(
            "eps loss",
            format!("expected [c,h,w] latents, got {shape:?}"),
        ));
    }
    let per = shape.iter().product::<usize>();
    let n = samples.len();
    let mut z_t = Vec::with_capacity(n * per);
    let mut eps_all = Vec::with_capacity(n * per);
    let mut anchors = Vec::with_capacity(n * per);
    let mut timesteps = Vec::with_capacity(n);
    let mut token_ids = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in samples {
        if s.z0.shape() != shape {
            return Err(TidmError::shape("eps loss", "mixed latent shapes in batch"));
        }
        let t = rng.next_below(schedule.len() as u64) as usize;
        let eps = rng.sample_standard_normal(&shape)?;
        let noised = schedule.add_noise(&s.z0, &eps, t)?;
        z_t.extend_from_slice(noised.data());
        eps_all.extend_from_slice(eps.data());
        timesteps.push(t);
        weights.push(T::from_f32(schedule.loss_weight(t)));
        token_ids.push(s.token_ids.clone());
        match &s.anchor {
            Some(a) => {
                anchors.extend_from_slice(a.data());
                mask.push(1.0);
            }
            None => {
                anchors.extend(std::iter::repeat(0.0f32).take(per));
                mask.push(0.0);
            }
        }
    }
    let full = vec![n, shape[0], shape[1], shape[2]];
    let batch = DenoiserBatch {
        z_t: Tensor::from_vec(full.clone(), z_t)?,
        timesteps,
        token_ids,
        anchor: Tensor::from_vec(full.clone(), anchors)?,
        anchor_mask: mask,
    };
    let eps_hat = denoiser_graph(tape, bound, dcfg, &batch)?;
    let target = tape.leaf(Tensor::from_vec(full, eps_all)?.cast::<T>());
    weighted_eps_mse_graph(tape, eps_hat, target, &weights)
}

/// Scalar eps-prediction loss without gradient bookkeeping.
pub fn loss_base(
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    samples: &[TrainSample],
    rng: &mut Rng,
) -> Result<f32> {
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, model);
    let loss = eps_loss_graph(&mut tape, &bound, dcfg, schedule, samples, rng)?;
    tape.value(loss).item()
}

/// Prior-preservation loss: instance term + lambda * prior term, each an
/// eps-prediction loss with
/// its own (t, eps) draws taken sequentially from `rng`.
pub fn loss_prior_preservation_graph<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    instance: &[TrainSample],
    prior: &[TrainSample],
    lambda: f32,
    rng: &mut Rng,
) -> Result<NodeId> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(TidmError::invalid(format!(
            "prior preservation: lambda must be >= 0, got {lambda}"
        )));
    }
    let inst = eps_loss_graph(tape, bound, dcfg, schedule, instance, rng)?;
    if lambda == 0.0 {
        return Ok(inst);
    }
    if prior.is_empty() {
        return Err(TidmError::invalid(
            "prior preservation: empty prior batch with lambda > 0",
        ));
    }
    let pr = eps_loss_graph(tape, bound, dcfg, schedule, prior, rng)?;
    tape.add_scaled(inst, pr, T::from_f32(lambda))
}

/// Scalar prior-preservation loss without gradient bookkeeping.
pub fn loss_prior_preservation(
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    instance: &[TrainSample],
    prior: &[TrainSample],
    lambda: f32,
    rng: &mut Rng,
) -> Result<f32> {
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, model);
    let loss =
        loss_prior_preservation_graph(&mut tape, &bound, dcfg, schedule, instance, prior, lambda, rng)?;
    tape.value(loss).item()
}

/// Encode every scene to a clean latent and tokenize its caption.
pub fn prepare_scene_latents(
    codec_params: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocabulary,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let pairs: Vec<(ImageTensor, String)> = dataset
        .scenes
        .iter()
        .map(|s| (s.image.clone(), s.spec.caption()))
        .chain(
            dataset
                .train_solo
                .iter()
                .map(|s| (s.image.clone(), format!("ident{}", s.identity))),
        )
        .collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let images: Vec<ImageTensor> = chunk.iter().map(|(img, _)| img.clone()).collect();
        let batch = codec::batch_from_images(&images)?;
        let z = codec::encode(codec_params, &batch)?;
        let s = z.shape().to_vec();
        let per = s[1] * s[2] * s[3];
        for (i, (_, caption)) in chunk.iter().enumerate() {
            let latent =
                Tensor::from_vec(vec![s[1], s[2], s[3]], z.data()[i * per..(i + 1) * per].to_vec())?;
            out.push((latent, vocab.tokenize(caption)?));
        }
    }
    Ok(out)
}

/// Base training on the eps-prediction loss. The scene's own clean latent doubles as the
/// anchor-stream input; text and anchor conditioning are independently
/// dropped per sample to enable classifier-free guidance.
pub fn train_base(
    codec_params: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocabulary,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(ParamStore, TrainMetrics)> {
    config.validate()?;
    if dataset.scenes.is_empty() {
        return Err(TidmError::invalid("train_base: empty dataset"));
    }
    let latents = prepare_scene_latents(codec_params, dataset, vocab)?;
    let mut rng = Rng::new(config.seed);
    let mut model = init_denoiser_params(dcfg, &mut rng)?;
    let mut cond_params = ParamStore::new();
    vocab.init_embeddings(&mut cond_params, &mut rng)?;
    model.merge(&cond_params)?;
    let metrics = train_loop(&mut model, dcfg, schedule, &latents, vocab, config, &mut rng)?;
    Ok((model, metrics))
}

fn train_loop(
    model: &mut ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    latents: &[(Tensor, Vec<usize>)],
    vocab: &Vocabulary,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainMetrics> {
    let mut adam = Adam::new(config.learning_rate);
    let mut metrics = TrainMetrics::default();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut step = model.step_count();
    for _epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    let (z0, ids) = &latents[i];
                    let drop_text = rng.next_bool(config.text_drop_prob as f64);
                    let drop_anchor = rng.next_bool(config.anchor_drop_prob as f64);
                    TrainSample {
                        z0: z0.clone(),
                        token_ids: if drop_text { vocab.null_ids() } else { ids.clone() },
                        anchor: if drop_anchor { None } else { Some(z0.clone()) },
                    }
                })
                .collect();
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind_params(&mut tape, model);
            let loss = eps_loss_graph(&mut tape, &bound, dcfg, schedule, &samples, rng)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(TidmError::Diverged { step });
            }
            let grads = backpropagate(&mut tape, loss, &bound)?;
            adam.step(model, &grads)?;
            step += 1;
            metrics.step_loss.push((step, loss_val));
            epoch_loss += loss_val as f64;
            batches += 1;
        }
        metrics.epoch_loss.push((epoch_loss / batches as f64) as f32);
    }
    metrics.final_loss = *metrics.epoch_loss.last().unwrap();
    model.set_step_count(step);
    Ok(metrics)
}

/// A frozen-base-generated class sample used by the prior-preservation term.
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub latent: Tensor,
    pub token_ids: Vec<usize>,
}

/// Sample `n` class-prompt latents from the frozen base model: unguided
/// (w=1), 50 DDIM steps, no anchor; bit-reproducible from the seed.
pub fn generate_prior_set(
    model: &ParamStore,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    class_prompt: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<PriorSample>> {
    if n == 0 {
        return Err(TidmError::invalid("generate_prior_set: n must be >= 1"));
    }
    let ids = vocab.tokenize(class_prompt)?;
    let cond = Conditioning::new(ids.clone(), None)?;
    let shape = [
        dcfg.latent_channels,
        crate::data::IMAGE_SIZE / codec::DOWN_FACTOR,
        crate::data::IMAGE_SIZE / codec::DOWN_FACTOR,
    ];
    let scfg = SamplerConfig {
        steps: 50,
        guidance_scale: 1.0,
        strength: 1.0,
        batch: n,
        seed,
    };
    let latents = sampler::ddim_sample(model, dcfg, schedule, vocab, &cond, &shape, &scfg)?;
    let per = shape.iter().product::<usize>();
    (0..n)
        .map(|i| {
            Ok(PriorSample {
                latent: Tensor::from_vec(
                    shape.to_vec(),
                    latents.data()[i * per..(i + 1) * per].to_vec(),
                )?,
                token_ids: ids.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DreamboothConfig {
    pub instance_images: Vec<ImageTensor>,
    pub placeholder: String,
    pub class_prompt: String,
    pub lambda_prior: f32,
    pub prior_set_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Lift the 3-5 instance image bound (for tests and experiments).
    pub allow_instance_count_override: bool,
}

impl Default for DreamboothConfig {
    fn default() -> Self {
        DreamboothConfig {
            instance_images: Vec::new(),
            placeholder: "sks".to_string(),
            class_prompt: String::new(),
            lambda_prior: 1.0,
            prior_set_size: 64,
            steps: 400,
            batch_size: 4,
            learning_rate: 5e-4,
            seed: 0,
            allow_instance_count_override: false,
        }
    }
}

/// Dreambooth fine-tuning: optimizes the denoiser and the placeholder
/// embedding on interleaved instance/prior batches; every other text
/// embedding (and the positional table) stays bitwise frozen. The codec
/// is not touched.
pub fn finetune_dreambooth(
    base_model: &ParamStore,
    codec_params: &ParamStore,
    vocab: &mut Vocabulary,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    db: &DreamboothConfig,
) -> Result<(ParamStore, TrainMetrics)> {
    if !db.allow_instance_count_override
        && !(3..=5).contains(&db.instance_images.len())
    {
        return Err(TidmError::invalid(format!(
            "finetune: need 3-5 instance images (got {}); set the override flag to bypass",
            db.instance_images.len()
        )));
    }
    if db.instance_images.is_empty() || db.batch_size == 0 {
        return Err(TidmError::invalid("finetune: empty instance set or zero batch size"));
    }
    if !db.lambda_prior.is_finite() || db.lambda_prior < 0.0 {
        return Err(TidmError::invalid(format!(
            "finetune: lambda must be >= 0, got {}",
            db.lambda_prior
        )));
    }
    let mut model = base_model.clone();
    let placeholder_id = match vocab.id(&db.placeholder) {
        Some(id) => id,
        None => vocab.register_placeholder(&mut model, &db.placeholder, db.seed)?,
    };
    if db.steps == 0 {
        return Ok((model, TrainMetrics::default()));
    }

    let instance_ids = vocab.tokenize(&db.placeholder)?;
    let instance: Vec<TrainSample> = db
        .instance_images
        .iter()
        .map(|img| {
            Ok(TrainSample {
                z0: codec::encode_image(codec_params, img)?,
                token_ids: instance_ids.clone(),
                anchor: None,
            })
        })
        .collect::<Result<_>>()?;
    let prior: Vec<TrainSample> = if db.lambda_prior > 0.0 {
        generate_prior_set(
            base_model,
            dcfg,
            schedule,
            vocab,
            &db.class_prompt,
            db.prior_set_size,
            db.seed,
        )?
        .into_iter()
        .map(|p| TrainSample {
            z0: p.latent,
            token_ids: p.token_ids,
            anchor: None,
        })
        .collect()
    } else {
        Vec::new()
    };

    let mut rng = Rng::new(db.seed);
    let mut adam = Adam::new(db.learning_rate);
    let mut metrics = TrainMetrics::default();
    let mut step = model.step_count();
    for _ in 0..db.steps {
        let inst_batch: Vec<TrainSample> = (0..db.batch_size)
            .map(|_| instance[rng.next_below(instance.len() as u64) as usize].clone())
            .collect();
        let prior_batch: Vec<TrainSample> = if db.lambda_prior > 0.0 {
            (0..db.batch_size)
                .map(|_| prior[rng.next_below(prior.len() as u64) as usize].clone())
                .collect()
        } else {
            Vec::new()
        };
        let mut tape: Tape<f32> = Tape::new();
        let bound = bind_params(&mut tape, &model);
        let loss = loss_prior_preservation_graph(
            &mut tape,
            &bound,
            dcfg,
            schedule,
            &inst_batch,
            &prior_batch,
            db.lambda_prior,
            &mut rng,
        )?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(TidmError::Diverged { step });
        }
        let mut grads = backpropagate(&mut tape, loss, &bound)?;
        // freeze every embedding row except the placeholder's, and the
        // positional table: their Adam state stays zero, so the update is
        // exactly zero and frozen rows remain bitwise unchanged
        if let Some(g) = grads.get_mut(TOKEN_EMBED) {
            let d = g.shape()[1];
            let mut data = vec![0.0f32; g.numel()];
            data[placeholder_id * d..(placeholder_id + 1) * d]
                .copy_from_slice(&g.data()[placeholder_id * d..(placeholder_id + 1) * d]);
            *g = Tensor::from_vec(g.shape().to_vec(), data)?;
        }
        if let Some(g) = grads.get_mut(POS_EMBED) {
            *g = Tensor::zeros(g.shape());
        }
        adam.step(&mut model, &grads)?;
        step += 1;
        metrics.step_loss.push((step, loss_val));
    }
    metrics.final_loss = metrics.step_loss.last().unwrap().1;
    let mean = metrics.step_loss.iter().map(|&(_, l)| l as f64).sum::<f64>()
        / metrics.step_loss.len() as f64;
    metrics.epoch_loss.push(mean as f32);
    model.set_step_count(step);
    Ok((model, metrics))
}
