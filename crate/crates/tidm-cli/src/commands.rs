//! Subcommand implementations. Each command resolves its settings from
//! flags, the optional config file, and built-in defaults (in that
//! order), does its work under `out_dir`, and records a `run.manifest`
//! describing the run.

use std::path::{Path, PathBuf};
use tidm_core::codec::{self, CodecTrainConfig};
use tidm_core::conditioning::Vocabulary;
use tidm_core::data::{self, make_dataset, Dataset, SceneSpec};
use tidm_core::denoiser::DenoiserConfig;
use tidm_core::eval::{evaluate, LabeledBatch};
use tidm_core::image::{self, ImageTensor};
use tidm_core::numerics::gradcheck::{finite_difference_check, GradCheckConfig, ParamMap};
use tidm_core::numerics::{ParamStore, Rng};
use tidm_core::probe::{train_probe_classifier, ProbeConfig};
use tidm_core::sampler::{self, SamplerConfig, DEFAULT_ANCHOR_STRENGTH};
use tidm_core::schedule::NoiseSchedule;
use tidm_core::trainer::{self, DreamboothConfig, TrainConfig};
use tidm_core::{checkpoint, Result, TidmError};

use crate::config::{resolve, FileConfig};

/// Errors that are not argument validation: training divergence, failed
/// invariant checks, broken artifacts.
#[derive(Debug)]
pub enum CliError {
    Core(TidmError),
    Runtime(String),
}

impl From<TidmError> for CliError {
    fn from(e: TidmError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    /// 2 = validation failure, 3 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(
                TidmError::InvalidArgument(_)
                | TidmError::Shape { .. }
                | TidmError::UnknownWord { .. },
            ) => 2,
            _ => 3,
        }
    }
}

pub type CmdResult = std::result::Result<(), CliError>;

/// Shared command context: resolved globals plus manifest notes.
pub struct Ctx {
    pub cfg: FileConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    notes: Vec<(String, String)>,
}

impl Ctx {
    pub fn new(cfg: FileConfig, seed: u64, out_dir: PathBuf) -> Ctx {
        Ctx {
            cfg,
            seed,
            out_dir,
            notes: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    fn write_manifest(&self, command: &str) -> Result<()> {
        let mut text = format!(
            "tool = tidm {}\ncommand = {command}\nseed = {}\nout_dir = {}\n",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.out_dir.display()
        );
        for (k, v) in self.cfg.entries() {
            text.push_str(&format!("config.{k} = {v}\n"));
        }
        for (k, v) in &self.notes {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = self.out_dir.join("run.manifest");
        std::fs::write(&path, text).map_err(|e| TidmError::io(path.display().to_string(), e))
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| TidmError::io(self.out_dir.display().to_string(), e))
    }

    fn default_data_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
}

fn checksum_hex(params: &ParamStore) -> String {
    format!("{:016x}", params.checksum())
}

/// All `.ppm` files in a directory, sorted by file name.
fn read_ppm_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| TidmError::io(dir.display().to_string(), e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| TidmError::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        out.push((name.clone(), image::read_ppm(&dir.join(name))?));
    }
    Ok(out)
}

/// Render the dataset and write it under `<out_dir>/dataset`.
pub fn make_data(
    ctx: &mut Ctx,
    scenes: Option<usize>,
    identities: Option<usize>,
    backgrounds: Option<usize>,
) -> CmdResult {
    let n_scenes = resolve(scenes, &ctx.cfg, "scenes", 400)?;
    let n_identities = resolve(identities, &ctx.cfg, "identities", 4)?;
    let n_backgrounds = resolve(backgrounds, &ctx.cfg, "backgrounds", 3)?;
    let dataset = make_dataset(n_scenes, n_identities, n_backgrounds, ctx.seed)?;

    let dir = ctx.default_data_dir();
    std::fs::create_dir_all(&dir).map_err(|e| TidmError::io(dir.display().to_string(), e))?;
    let mut captions = String::new();
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.ppm");
        image::write_ppm(&dir.join(&name), &scene.image)?;
        image::write_pgm_mask(
            &dir.join(format!("mask_{i:04}.pgm")),
            scene.image.height(),
            scene.image.width(),
            &scene.background_mask,
        )?;
        captions.push_str(&format!("{name}\t{}\n", scene.spec.caption()));
    }
    let captions_path = dir.join("captions.txt");
    std::fs::write(&captions_path, captions)
        .map_err(|e| TidmError::io(captions_path.display().to_string(), e))?;
    for (i, solo) in dataset.heldout_solo.iter().enumerate() {
        image::write_ppm(&dir.join(format!("solo_{i:02}.ppm")), &solo.image)?;
    }
    let meta = format!(
        "scenes = {n_scenes}\nidentities = {n_identities}\nbackgrounds = {n_backgrounds}\nseed = {}\n",
        ctx.seed
    );
    let meta_path = dir.join("dataset.meta");
    std::fs::write(&meta_path, meta)
        .map_err(|e| TidmError::io(meta_path.display().to_string(), e))?;

    ctx.note("dataset.scenes", n_scenes);
    ctx.note("dataset.identities", n_identities);
    ctx.note("dataset.backgrounds", n_backgrounds);
    ctx.note("dataset.heldout_solo", dataset.heldout_solo.len());
    ctx.write_manifest("make-data")?;
    println!(
        "wrote {} scenes, {} masks, {} solo renders to {}",
        n_scenes,
        n_scenes,
        dataset.heldout_solo.len(),
        dir.display()
    );
    Ok(())
}

/// Regenerate the dataset recorded in `<dir>/dataset.meta`. The renderer
/// is deterministic, so this reproduces the written corpus bit for bit; a
/// spot check against the first stored image catches stale directories.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = FileConfig::load(&dir.join("dataset.meta"))?;
    let missing = |k: &str| TidmError::invalid(format!("dataset.meta: missing key {k}"));
    let n_scenes: usize = meta.get("scenes")?.ok_or_else(|| missing("scenes"))?;
    let n_identities: usize = meta.get("identities")?.ok_or_else(|| missing("identities"))?;
    let n_backgrounds: usize = meta.get("backgrounds")?.ok_or_else(|| missing("backgrounds"))?;
    let seed: u64 = meta.get("seed")?.ok_or_else(|| missing("seed"))?;
    let dataset = make_dataset(n_scenes, n_identities, n_backgrounds, seed)?;
    let first = dir.join("scene_0000.ppm");
    if first.exists() {
        let stored = image::read_ppm(&first)?;
        if stored.to_bytes() != dataset.scenes[0].image.to_bytes() {
            return Err(TidmError::invalid(format!(
                "{}: stored images do not match dataset.meta; re-run make-data",
                dir.display()
            )));
        }
    }
    Ok(dataset)
}

pub fn train_codec(
    ctx: &mut Ctx,
    data_dir: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f32>,
) -> CmdResult {
    let defaults = CodecTrainConfig::default();
    let config = CodecTrainConfig {
        epochs: resolve(epochs, &ctx.cfg, "codec_epochs", defaults.epochs)?,
        batch_size: resolve(batch, &ctx.cfg, "codec_batch", defaults.batch_size)?,
        learning_rate: resolve(lr, &ctx.cfg, "codec_lr", defaults.learning_rate)?,
        seed: ctx.seed,
    };
    let dataset = load_dataset(&data_dir.unwrap_or_else(|| ctx.default_data_dir()))?;
    let mut images: Vec<ImageTensor> = dataset.scenes.iter().map(|s| s.image.clone()).collect();
    images.extend(dataset.train_solo.iter().map(|s| s.image.clone()));
    images.extend(dataset.heldout_solo.iter().map(|s| s.image.clone()));

    let (params, metrics) = codec::train_codec(&images, &config)?;
    ctx.ensure_out_dir()?;
    let path = ctx.out_dir.join("codec.tidm");
    checkpoint::save_checkpoint(&path, &params)?;
    ctx.note("codec.final_mse", metrics.final_mse);
    ctx.note("checkpoint.codec", checksum_hex(&params));
    ctx.write_manifest("train-codec")?;
    println!(
        "codec trained on {} images, final mse {:.5}, saved to {}",
        images.len(),
        metrics.final_mse,
        path.display()
    );
    Ok(())
}

pub fn train_base(
    ctx: &mut Ctx,
    data_dir: Option<PathBuf>,
    codec_path: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f32>,
) -> CmdResult {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: resolve(epochs, &ctx.cfg, "base_epochs", defaults.epochs)?,
        batch_size: resolve(batch, &ctx.cfg, "base_batch", defaults.batch_size)?,
        learning_rate: resolve(lr, &ctx.cfg, "base_lr", defaults.learning_rate)?,
        seed: ctx.seed,
        ..defaults
    };
    let dataset = load_dataset(&data_dir.unwrap_or_else(|| ctx.default_data_dir()))?;
    let codec_path = codec_path.unwrap_or_else(|| ctx.out_dir.join("codec.tidm"));
    let codec_params = checkpoint::load_checkpoint(&codec_path)?;
    let mut vocab = Vocabulary::new(dataset.n_identities, dataset.n_backgrounds);
    let dcfg = DenoiserConfig::default();
    let schedule = NoiseSchedule::default_schedule();

    let (model, metrics) = trainer::train_base(
        &codec_params,
        &dataset,
        &vocab,
        &dcfg,
        &schedule,
        &config,
    )?;
    ctx.ensure_out_dir()?;
    let model_path = ctx.out_dir.join("base.tidm");
    checkpoint::save_checkpoint(&model_path, &model)?;
    vocab.save(&ctx.out_dir.join("vocab.txt"))?;
    ctx.note("base.first_epoch_loss", metrics.epoch_loss[0]);
    ctx.note("base.final_loss", metrics.final_loss);
    ctx.note("checkpoint.codec", checksum_hex(&codec_params));
    ctx.note("checkpoint.base", checksum_hex(&model));
    ctx.write_manifest("train-base")?;
    println!(
        "base model trained for {} epochs, loss {:.4} -> {:.4}, saved to {}",
        config.epochs,
        metrics.epoch_loss[0],
        metrics.final_loss,
        model_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn finetune(
    ctx: &mut Ctx,
    base: Option<PathBuf>,
    codec_path: Option<PathBuf>,
    vocab_path: Option<PathBuf>,
    instance_dir: Option<PathBuf>,
    placeholder: Option<String>,
    class_prompt: Option<String>,
    lambda: Option<f32>,
    steps: Option<usize>,
) -> CmdResult {
    let base_path = base.unwrap_or_else(|| ctx.out_dir.join("base.tidm"));
    let codec_path = codec_path.unwrap_or_else(|| ctx.out_dir.join("codec.tidm"));
    let vocab_path = vocab_path.unwrap_or_else(|| ctx.out_dir.join("vocab.txt"));
    let base_model = checkpoint::load_checkpoint(&base_path)?;
    let codec_params = checkpoint::load_checkpoint(&codec_path)?;
    let mut vocab = Vocabulary::load(&vocab_path)?;

    // default instance set: the first four held-out solo renders
    let instance_images: Vec<ImageTensor> = match instance_dir {
        Some(dir) => read_ppm_dir(&dir)?.into_iter().map(|(_, img)| img).collect(),
        None => read_ppm_dir(&ctx.default_data_dir())?
            .into_iter()
            .filter(|(name, _)| name.starts_with("solo_"))
            .take(4)
            .map(|(_, img)| img)
            .collect(),
    };

    let db = DreamboothConfig {
        instance_images,
        placeholder: resolve(placeholder, &ctx.cfg, "placeholder", "sks".to_string())?,
        class_prompt: resolve(
            class_prompt,
            &ctx.cfg,
            "class_prompt",
            "ident0 meets ident1 in bg0".to_string(),
        )?,
        lambda_prior: resolve(lambda, &ctx.cfg, "lambda_prior", 1.0)?,
        prior_set_size: resolve(None, &ctx.cfg, "prior_set_size", 64)?,
        steps: resolve(steps, &ctx.cfg, "finetune_steps", 400)?,
        batch_size: resolve(None, &ctx.cfg, "finetune_batch", 4)?,
        learning_rate: resolve(None, &ctx.cfg, "finetune_lr", 5e-4)?,
        seed: ctx.seed,
        allow_instance_count_override: false,
    };
    let dcfg = DenoiserConfig::default();
    let schedule = NoiseSchedule::default_schedule();
    let (model, metrics) =
        trainer::finetune_dreambooth(&base_model, &codec_params, &mut vocab, &dcfg, &schedule, &db)?;

    ctx.ensure_out_dir()?;
    let model_path = ctx.out_dir.join("finetuned.tidm");
    checkpoint::save_checkpoint(&model_path, &model)?;
    vocab.save(&vocab_path)?;
    ctx.note("finetune.placeholder", &db.placeholder);
    ctx.note("finetune.lambda_prior", db.lambda_prior);
    ctx.note("finetune.final_loss", metrics.final_loss);
    ctx.note("checkpoint.base", checksum_hex(&base_model));
    ctx.note("checkpoint.finetuned", checksum_hex(&model));
    ctx.write_manifest("finetune")?;
    println!(
        "fine-tuned {} steps on {} instance images, loss {:.4}, saved to {}",
        db.steps,
        db.instance_images.len(),
        metrics.final_loss,
        model_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    ctx: &mut Ctx,
    model_path: Option<PathBuf>,
    codec_path: Option<PathBuf>,
    vocab_path: Option<PathBuf>,
    prompt: String,
    anchor: Option<PathBuf>,
    steps: Option<usize>,
    guidance: Option<f32>,
    strength: Option<f32>,
    batch: Option<usize>,
) -> CmdResult {
    let model_path = model_path.unwrap_or_else(|| ctx.out_dir.join("base.tidm"));
    let codec_path = codec_path.unwrap_or_else(|| ctx.out_dir.join("codec.tidm"));
    let vocab_path = vocab_path.unwrap_or_else(|| ctx.out_dir.join("vocab.txt"));
    let model = checkpoint::load_checkpoint(&model_path)?;
    let codec_params = checkpoint::load_checkpoint(&codec_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let anchor_image = anchor.as_deref().map(image::read_ppm).transpose()?;

    let default_strength = if anchor_image.is_some() {
        DEFAULT_ANCHOR_STRENGTH
    } else {
        1.0
    };
    let config = SamplerConfig {
        steps: resolve(steps, &ctx.cfg, "steps", 50)?,
        guidance_scale: resolve(guidance, &ctx.cfg, "guidance", 7.5)?,
        strength: resolve(strength, &ctx.cfg, "strength", default_strength)?,
        batch: resolve(batch, &ctx.cfg, "batch", 4)?,
        seed: ctx.seed,
    };
    let dcfg = DenoiserConfig::default();
    let schedule = NoiseSchedule::default_schedule();
    let images = sampler::generate(
        &codec_params,
        &model,
        &dcfg,
        &schedule,
        &vocab,
        &prompt,
        anchor_image.as_ref(),
        &config,
    )?;

    ctx.ensure_out_dir()?;
    for (i, img) in images.iter().enumerate() {
        image::write_ppm(&ctx.out_dir.join(format!("sample_{i:02}.ppm")), img)?;
    }
    ctx.note("generate.prompt", &prompt);
    ctx.note("generate.steps", config.steps);
    ctx.note("generate.guidance", config.guidance_scale);
    ctx.note("generate.strength", config.strength);
    ctx.note("generate.batch", config.batch);
    if let Some(a) = &anchor {
        ctx.note("generate.anchor", a.display());
    }
    ctx.note("checkpoint.model", checksum_hex(&model));
    ctx.note("checkpoint.codec", checksum_hex(&codec_params));
    ctx.write_manifest("generate")?;
    println!(
        "wrote {} samples for {prompt:?} to {}",
        images.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

pub fn eval(
    ctx: &mut Ctx,
    images_dir: Option<PathBuf>,
    prompt: String,
    data_dir: Option<PathBuf>,
    codec_path: Option<PathBuf>,
) -> CmdResult {
    let images_dir = images_dir.unwrap_or_else(|| ctx.out_dir.clone());
    let codec_path = codec_path.unwrap_or_else(|| ctx.out_dir.join("codec.tidm"));
    let codec_params = checkpoint::load_checkpoint(&codec_path)?;
    let dataset = load_dataset(&data_dir.unwrap_or_else(|| ctx.default_data_dir()))?;

    let spec = SceneSpec::from_caption(&prompt)?;
    let (_, mask) = data::render_scene(&spec)?;
    let ((ax, ay), (bx, by)) = spec.sprite_centers();
    let targets = [(ax, ay, spec.identity_a), (bx, by, spec.identity_b)];

    let images: Vec<ImageTensor> = read_ppm_dir(&images_dir)?
        .into_iter()
        .filter(|(name, _)| name.starts_with("sample_"))
        .map(|(_, img)| img)
        .collect();
    if images.is_empty() {
        return Err(TidmError::invalid(format!(
            "no sample_*.ppm images found in {}",
            images_dir.display()
        ))
        .into());
    }

    let probe_config = ProbeConfig {
        seed: ctx.seed,
        ..ProbeConfig::default()
    };
    let (probe, _) = train_probe_classifier(&dataset, &probe_config)?;
    let batch = LabeledBatch {
        images: &images,
        targets: &targets,
    };
    let report = evaluate(&probe, &codec_params, &batch, &batch, &mask)?;

    let text = format!(
        "identity_accuracy = {:.4}\nclass_accuracy = {:.4}\nbackground_consistency = {:.4}\nreconstruction_psnr = {:.2}\nsamples = {}\n",
        report.identity_accuracy,
        report.class_accuracy,
        report.background_consistency,
        report.reconstruction_psnr,
        report.samples
    );
    print!("{text}");
    ctx.ensure_out_dir()?;
    let report_path = ctx.out_dir.join("eval.report");
    std::fs::write(&report_path, &text)
        .map_err(|e| TidmError::io(report_path.display().to_string(), e))?;
    ctx.note("eval.prompt", &prompt);
    ctx.note("eval.samples", report.samples);
    ctx.note("checkpoint.codec", checksum_hex(&codec_params));
    ctx.write_manifest("eval")?;
    Ok(())
}

/// Finite-difference verification of the full model gradient on a small
/// configuration. Slow in absolute terms but minutes, not hours.
pub fn gradcheck(ctx: &mut Ctx) -> CmdResult {
    let config = DenoiserConfig {
        base_channels: 6,
        channel_multipliers: vec![1, 2],
        blocks_per_resolution: 1,
        attention_levels: 1,
        time_embed_dim: 8,
        context_dim: 6,
        latent_channels: 4,
    };
    let mut rng = Rng::new(ctx.seed.wrapping_add(7));
    let mut params = tidm_core::denoiser::init_denoiser_params(&config, &mut rng)?;
    params.insert(
        "cond/token_embed".to_string(),
        rng.sample_standard_normal(&[5, config.context_dim])?.scale(0.3),
    )?;
    params.insert(
        "cond/pos_embed".to_string(),
        rng.sample_standard_normal(&[tidm_core::conditioning::SEQ_LEN, config.context_dim])?
            .scale(0.3),
    )?;
    // perturb away from zero so zero-initialized layers don't hide
    // upstream gradients
    let mut map = ParamMap::new();
    for (name, t) in params.iter() {
        let noise = rng.sample_standard_normal(t.shape())?.cast::<f64>();
        map.insert(name.to_string(), t.cast::<f64>().add(&noise.scale(0.05))?);
    }

    let batch = tidm_core::denoiser::DenoiserBatch {
        z_t: rng.sample_standard_normal(&[1, 4, 6, 6])?,
        timesteps: vec![123],
        token_ids: vec![vec![1, 2, 3, 4, 0, 0, 0, 0]],
        anchor: rng.sample_standard_normal(&[1, 4, 6, 6])?,
        anchor_mask: vec![1.0],
    };
    let eps = rng.sample_standard_normal(&[1, 4, 6, 6])?.cast::<f64>();
    let gc = GradCheckConfig {
        max_coords_per_param: 4,
        h: 1e-4,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&map, &gc, move |tape, bound| {
        let out = tidm_core::denoiser::denoiser_graph(tape, bound, &config, &batch)?;
        let target = tape.leaf(eps.clone());
        tape.mse_loss(out, target)
    })?;

    println!(
        "gradcheck: {} coordinates, max rel err {:.3e} at {}",
        report.coords_checked, report.max_rel_err, report.worst_param
    );
    ctx.ensure_out_dir()?;
    ctx.note("gradcheck.coords", report.coords_checked);
    ctx.note("gradcheck.max_rel_err", format!("{:.3e}", report.max_rel_err));
    ctx.write_manifest("gradcheck")?;
    if report.max_rel_err > 1e-3 {
        return Err(CliError::Runtime(format!(
            "gradcheck failed: max rel err {:.3e} at {}",
            report.max_rel_err, report.worst_param
        )));
    }
    println!("gradcheck passed");
    Ok(())
}
