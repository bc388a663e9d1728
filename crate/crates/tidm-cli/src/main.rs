//! `tidm` — command-line driver for the latent diffusion pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad
//! argument or config values), 3 runtime failure (I/O, divergence,
//! corrupt artifacts).

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use commands::{CliError, Ctx};
use config::FileConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "tidm", version, about = "Text-and-anchor-image guided latent diffusion")]
struct Cli {
    /// Plain `key = value` config file; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomness in the command
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for artifacts and the run manifest
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic sprite corpus (images, captions, masks)
    MakeData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        backgrounds: Option<usize>,
    },
    /// Train the latent autoencoder
    TrainCodec {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Train the base denoiser on the scene corpus
    TrainBase {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Bind a new subject to a placeholder token with prior preservation
    Finetune {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Directory of 3-5 instance images (default: solo renders)
        #[arg(long)]
        instance_dir: Option<PathBuf>,
        #[arg(long)]
        placeholder: Option<String>,
        #[arg(long)]
        class_prompt: Option<String>,
        /// Prior preservation weight
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample images from a trained model
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// Anchor image; enables img2img-style initialization
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// DDIM steps (default 50)
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (default 7.5)
        #[arg(long)]
        guidance: Option<f32>,
        /// Denoising strength in [0,1]; values below 1 require --anchor
        #[arg(long)]
        strength: Option<f32>,
        /// Batch size (default 4)
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Score generated samples against the probe classifier
    Eval {
        /// Directory holding sample_*.ppm images (default: out dir)
        #[arg(long)]
        images: Option<PathBuf>,
        /// The prompt the samples were generated from
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Verify model gradients against finite differences
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.get("seed")?.unwrap_or(0),
    };
    let out_dir = match cli.out_dir {
        Some(d) => d,
        None => cfg
            .get::<PathBuf>("out_dir")?
            .unwrap_or_else(|| PathBuf::from("out")),
    };
    let mut ctx = Ctx::new(cfg, seed, out_dir);

    match cli.command {
        Command::MakeData {
            scenes,
            identities,
            backgrounds,
        } => commands::make_data(&mut ctx, scenes, identities, backgrounds),
        Command::TrainCodec {
            data_dir,
            epochs,
            batch,
            lr,
        } => commands::train_codec(&mut ctx, data_dir, epochs, batch, lr),
        Command::TrainBase {
            data_dir,
            codec,
            epochs,
            batch,
            lr,
        } => commands::train_base(&mut ctx, data_dir, codec, epochs, batch, lr),
        Command::Finetune {
            base,
            codec,
            vocab,
            instance_dir,
            placeholder,
            class_prompt,
            lambda,
            steps,
        } => commands::finetune(
            &mut ctx,
            base,
            codec,
            vocab,
            instance_dir,
            placeholder,
            class_prompt,
            lambda,
            steps,
        ),
        Command::Generate {
            model,
            codec,
            vocab,
            prompt,
            anchor,
            steps,
            guidance,
            strength,
            batch,
        } => commands::generate(
            &mut ctx, model, codec, vocab, prompt, anchor, steps, guidance, strength, batch,
        ),
        Command::Eval {
            images,
            prompt,
            data_dir,
            codec,
        } => commands::eval(&mut ctx, images, prompt, data_dir, codec),
        Command::Gradcheck => commands::gradcheck(&mut ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
